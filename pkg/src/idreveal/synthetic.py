"""Synthetic identity world for desk-scale experiments.

Each identity has a static shape vector and a motion signature: a bank of
oscillators, one per expression/pose channel, each with its own base
frequency, amplitude, second-harmonic coupling and phase offset, plus smooth
noise.  Videos of an identity share the signature but draw a fresh global
phase.  Recording contexts add a small identity-specific shape offset and a
pose bias shared by everyone filmed in that context.

Face swaps keep the driver's motion and paste the target's shape; reenactments
keep the subject's shape and drive it with another identity's motion.
"""
from __future__ import annotations

import enum
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, SelfReenactError, SelfSwapError
from .features import (
    EXPR_SLICE,
    FEATURE_DIM,
    MOTION_SLICE,
    N_EXPR,
    N_POSE,
    N_SHAPE,
    POSE_SLICE,
    SHAPE_SLICE,
    DatasetManifest,
    FeatureSequence,
    ManifestRecord,
    write_manifest,
    write_sequence,
)

N_MOTION = N_EXPR + N_POSE
DEFAULT_CONTEXTS = ("studio", "office", "outdoor", "car")


class ManipulationKind(enum.Enum):
    FaceSwap = "FaceSwap"
    Reenactment = "Reenactment"


@dataclass(frozen=True)
class WorldParams:
    """Scales of the generative model (all in raw coefficient units)."""
    shape_scale: float = 0.02
    context_shape_scale: float = 0.02
    shape_jitter: float = 0.5
    freq_range: tuple = (0.02, 0.15)
    amp_range: tuple = (0.5, 1.5)
    coupling_range: tuple = (0.0, 0.6)
    noise_range: tuple = (0.02, 0.08)
    noise_memory: float = 0.8
    tempo_jitter: float = 0.02
    context_pose_scale: float = 0.3


@dataclass(frozen=True)
class IdentitySpec:
    index: int
    world_seed: int
    shape_vec: np.ndarray
    freqs: np.ndarray
    amps: np.ndarray
    coupling: np.ndarray
    phase_offsets: np.ndarray
    noise: np.ndarray
    params: WorldParams = field(default_factory=WorldParams)

    @property
    def identity_id(self) -> str:
        return f"id{self.index:04d}"


def _ctx_key(context: str) -> int:
    return zlib.crc32(context.encode("utf-8"))


def make_identity(world_seed: int, index: int, params: WorldParams | None = None) -> IdentitySpec:
    params = params or WorldParams()
    rng = np.random.default_rng([world_seed, 0, index])
    return IdentitySpec(
        index=index,
        world_seed=world_seed,
        shape_vec=rng.normal(0.0, params.shape_scale, N_SHAPE),
        freqs=rng.uniform(*params.freq_range, N_MOTION),
        amps=rng.uniform(*params.amp_range, N_MOTION),
        coupling=rng.uniform(*params.coupling_range, N_MOTION),
        phase_offsets=rng.uniform(0.0, 2 * np.pi, N_MOTION),
        noise=rng.uniform(*params.noise_range, N_MOTION),
        params=params,
    )


def context_shape_offset(ident: IdentitySpec, context: str) -> np.ndarray:
    rng = np.random.default_rng([ident.world_seed, 1, ident.index, _ctx_key(context)])
    return rng.normal(0.0, ident.params.context_shape_scale, N_SHAPE)


def context_pose_bias(world_seed: int, context: str, params: WorldParams) -> np.ndarray:
    rng = np.random.default_rng([world_seed, 2, _ctx_key(context)])
    return rng.normal(0.0, params.context_pose_scale, N_POSE)


def motion_trajectories(ident: IdentitySpec, T: int, rng) -> np.ndarray:
    """(T, 22) expression+pose trajectories driven by ``ident``'s oscillator bank."""
    p = ident.params
    psi = rng.uniform(0.0, 2 * np.pi)
    tempo = 1.0 + p.tempo_jitter * rng.uniform(-1.0, 1.0)
    t = np.arange(T)[:, None]
    theta = 2 * np.pi * ident.freqs * tempo * t + ident.phase_offsets + psi
    clean = ident.amps * (np.sin(theta) + ident.coupling * np.sin(2 * theta))
    eps = rng.normal(0.0, 1.0, (T, N_MOTION))
    noise = np.empty_like(eps)
    a = p.noise_memory
    noise[0] = eps[0]
    for i in range(1, T):
        noise[i] = a * noise[i - 1] + np.sqrt(1 - a * a) * eps[i]
    return clean + ident.noise * noise


def render_video(ident: IdentitySpec, context: str, T: int, rng, video_id: str = "",
                 fps: float = 25.0) -> FeatureSequence:
    if T < 1:
        raise ConfigError("T must be >= 1")
    frames = np.empty((T, FEATURE_DIM))
    shape = ident.shape_vec + context_shape_offset(ident, context)
    frames[:, SHAPE_SLICE] = shape + ident.params.shape_jitter * rng.normal(0.0, 1.0, (T, N_SHAPE))
    frames[:, MOTION_SLICE] = motion_trajectories(ident, T, rng)
    frames[:, POSE_SLICE] += context_pose_bias(ident.world_seed, context, ident.params)
    return FeatureSequence(frames, fps=fps, video_id=video_id,
                           identity_id=ident.identity_id, context=context)


def face_swap(target: IdentitySpec, driver_video: FeatureSequence, video_id: str = "") -> FeatureSequence:
    """Paste ``target``'s shape onto the driver's expressions and pose."""
    if driver_video.identity_id == target.identity_id:
        raise SelfSwapError(f"driver and target are both {target.identity_id}")
    frames = np.array(driver_video.frames)
    frames[:, SHAPE_SLICE] = target.shape_vec
    return driver_video.with_frames(frames, identity_id=target.identity_id,
                                    video_id=video_id or f"fs_{target.identity_id}_{driver_video.video_id}")


def reenact(subject_video: FeatureSequence, driver: IdentitySpec, rng, video_id: str = "") -> FeatureSequence:
    """Keep the subject's shape channels, regenerate expression and pose from ``driver``."""
    if subject_video.identity_id == driver.identity_id:
        raise SelfReenactError(f"subject and driver are both {driver.identity_id}")
    frames = np.array(subject_video.frames)
    frames[:, MOTION_SLICE] = motion_trajectories(driver, len(subject_video), rng)
    if subject_video.context:
        frames[:, POSE_SLICE] += context_pose_bias(driver.world_seed, subject_video.context, driver.params)
    return subject_video.with_frames(frames, video_id=video_id or f"re_{subject_video.video_id}_{driver.identity_id}")


def dominant_frequency(x: np.ndarray) -> float:
    """Frequency (cycles/frame) of the largest non-DC FFT bin of a 1-D signal."""
    spec = np.abs(np.fft.rfft(x - x.mean()))
    freqs = np.fft.rfftfreq(len(x))
    return float(freqs[1 + np.argmax(spec[1:])])


# --- benchmark assembly ----------------------------------------------------------

@dataclass(frozen=True)
class TestLabel:
    video_id: str
    identity_id: str
    label: str  # REAL or FAKE
    manipulation: str  # none, FaceSwap, Reenactment


@dataclass(frozen=True)
class Benchmark:
    train: DatasetManifest
    val: DatasetManifest
    references: DatasetManifest
    test: DatasetManifest
    labels: tuple


@dataclass(frozen=True)
class _Job:
    kind: str
    path: str
    seed: int
    index: int
    stream: tuple
    context: str
    T: int
    video_id: str
    params: WorldParams
    other: int = -1


def _video_rng(seed, *stream):
    return np.random.default_rng([seed, 3, *stream])


def _run_job(job: _Job) -> None:
    ident = make_identity(job.seed, job.index, job.params)
    rng = _video_rng(job.seed, *job.stream)
    if job.kind == "real":
        seq = render_video(ident, job.context, job.T, rng, video_id=job.video_id)
    elif job.kind == "faceswap":
        driver = make_identity(job.seed, job.other, job.params)
        drive = render_video(driver, job.context, job.T, rng, video_id=job.video_id + "_src")
        seq = face_swap(ident, drive, video_id=job.video_id)
    elif job.kind == "reenact":
        subject = render_video(ident, job.context, job.T, rng, video_id=job.video_id + "_src")
        seq = reenact(subject, make_identity(job.seed, job.other, job.params), rng, video_id=job.video_id)
    else:
        raise ValueError(job.kind)
    write_sequence(job.path, seq)


def build_benchmark(out_dir, n_ids: int = 16, vids_per_id: int = 8, T: int = 200,
                    contexts=DEFAULT_CONTEXTS, seed: int = 0, n_val_ids: int = 8,
                    n_test_ids: int = 8, test_real_per_id: int = 8, test_fake_per_id: int = 8,
                    params: WorldParams | None = None, jobs: int = 1) -> Benchmark:
    """Render train/val/test splits under ``out_dir`` and write their manifests.

    Identities of the three splits are disjoint.  Each test identity gets
    ``vids_per_id`` pristine reference videos, ``test_real_per_id`` held-out
    real videos and ``test_fake_per_id`` fakes, half face swaps and half
    reenactments, driven by other test identities.
    """
    params = params or WorldParams()
    contexts = tuple(contexts)
    if n_ids < 4:
        raise ConfigError("need at least 4 training identities")
    if len(contexts) < 2:
        raise ConfigError("leave-one-context-out needs at least 2 contexts")
    if n_test_ids and n_test_ids < 2:
        raise ConfigError("fakes need at least 2 test identities")
    if test_fake_per_id % 2:
        raise ConfigError("test_fake_per_id must be even (half face swaps, half reenactments)")
    if vids_per_id < 2:
        raise ConfigError("need at least 2 videos per identity")
    out = Path(out_dir)
    jobs_list: list = []
    manifests: dict = {"train": [], "val": [], "references": [], "test": []}
    labels = []

    def add(split, sub, kind, index, k, context, tag, other=-1):
        ident_id = f"id{index:04d}"
        video_id = f"{ident_id}_{tag}{k:03d}"
        rel = Path(sub) / f"{video_id}.idrf"
        jobs_list.append(_Job(kind, str(out / rel), seed, index, (index, hash_tag(tag), k),
                              context, T, video_id, params, other))
        manifests[split].append(ManifestRecord(str(rel), ident_id, video_id, context))
        return video_id, ident_id

    ranges = {
        "train": range(0, n_ids),
        "val": range(n_ids, n_ids + n_val_ids),
    }
    for split, ids in ranges.items():
        for index in ids:
            for k in range(vids_per_id):
                add(split, split, "real", index, k, contexts[(k + index) % len(contexts)], "v")
    test_ids = list(range(n_ids + n_val_ids, n_ids + n_val_ids + n_test_ids))
    for pos, index in enumerate(test_ids):
        for k in range(vids_per_id):
            add("references", "test/references", "real", index, k,
                contexts[(k + index) % len(contexts)], "ref")
        for k in range(test_real_per_id):
            vid, iid = add("test", "test/real", "real", index, k,
                           contexts[(k + index + 1) % len(contexts)], "real")
            labels.append(TestLabel(vid, iid, "REAL", "none"))
        for k in range(test_fake_per_id):
            other = test_ids[(pos + 1 + k % (len(test_ids) - 1)) % len(test_ids)]
            kind = "faceswap" if k % 2 == 0 else "reenact"
            vid, iid = add("test", "test/fake", kind, index, k,
                           contexts[(k + index + 2) % len(contexts)], "fs" if kind == "faceswap" else "re",
                           other=other)
            labels.append(TestLabel(vid, iid, "FAKE",
                                    "FaceSwap" if kind == "faceswap" else "Reenactment"))

    for sub in ("train", "val", "test/references", "test/real", "test/fake"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_run_job, jobs_list, chunksize=8))
    else:
        for job in jobs_list:
            _run_job(job)

    result = {}
    for name, recs in manifests.items():
        write_manifest(out / f"{name}.tsv", recs)
        result[name] = DatasetManifest(tuple(recs), root=out)
    write_labels(out / "test_labels.tsv", labels)
    return Benchmark(result["train"], result["val"], result["references"], result["test"], tuple(labels))


def hash_tag(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


LABEL_HEADER = "video_id\tidentity_id\tlabel\tmanipulation"


def write_labels(path, labels) -> None:
    lines = [LABEL_HEADER] + [f"{l.video_id}\t{l.identity_id}\t{l.label}\t{l.manipulation}" for l in labels]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_labels(path) -> list:
    rows = Path(path).read_text(encoding="utf-8").splitlines()
    if not rows or rows[0] != LABEL_HEADER:
        raise ValueError(f"{path}: missing label header")
    return [TestLabel(*r.split("\t")) for r in rows[1:] if r]
