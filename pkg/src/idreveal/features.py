"""3DMM feature sequences: in-memory types, the IDRF binary format and manifests.

A frame is the 62-vector regressed per video frame: 40 shape coefficients,
10 expression coefficients and a 3x4 rigid pose matrix stored row-major.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    DimensionError,
    EmptyInputError,
    FormatError,
    IdentityMismatchError,
    TruncationError,
    DataError,
)

N_SHAPE = 40
N_EXPR = 10
N_POSE = 12
FEATURE_DIM = N_SHAPE + N_EXPR + N_POSE

SHAPE_SLICE = slice(0, N_SHAPE)
EXPR_SLICE = slice(N_SHAPE, N_SHAPE + N_EXPR)
POSE_SLICE = slice(N_SHAPE + N_EXPR, FEATURE_DIM)
MOTION_SLICE = slice(N_SHAPE, FEATURE_DIM)

MAGIC = b"IDRF"
VERSION = 1
_HEADER = struct.Struct("<4sIIIf")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FeatureFrame:
    values: np.ndarray

    def __post_init__(self):
        v = _frozen(self.values).reshape(-1)
        if v.shape[0] != FEATURE_DIM:
            raise DimensionError(f"frame has {v.shape[0]} values, expected {FEATURE_DIM}")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_parts(cls, shape, expression, pose) -> "FeatureFrame":
        pose = np.asarray(pose, dtype=np.float64).reshape(-1)
        return cls(np.concatenate([np.ravel(shape), np.ravel(expression), pose]))

    @property
    def shape(self) -> np.ndarray:
        return self.values[SHAPE_SLICE]

    @property
    def expression(self) -> np.ndarray:
        return self.values[EXPR_SLICE]

    @property
    def pose(self) -> np.ndarray:
        """Pose as the 3x4 rigid transform."""
        return self.values[POSE_SLICE].reshape(3, 4)


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray
    fps: float = 25.0
    video_id: str = ""
    identity_id: Optional[str] = None
    context: Optional[str] = None

    def __post_init__(self):
        f = _frozen(self.frames)
        if f.ndim != 2:
            raise DimensionError(f"frames must be 2-D (T, {FEATURE_DIM}), got shape {f.shape}")
        if f.shape[1] != FEATURE_DIM:
            raise DimensionError(f"frame dimension {f.shape[1]} != {FEATURE_DIM}")
        if f.shape[0] < 1:
            raise EmptyInputError("a feature sequence needs at least one frame")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        object.__setattr__(self, "frames", f)

    def __len__(self) -> int:
        return self.frames.shape[0]

    def frame(self, t: int) -> FeatureFrame:
        return FeatureFrame(self.frames[t])

    def with_frames(self, frames: np.ndarray, **labels) -> "FeatureSequence":
        kw = dict(fps=self.fps, video_id=self.video_id,
                  identity_id=self.identity_id, context=self.context)
        kw.update(labels)
        return FeatureSequence(frames, **kw)

    def window(self, start: int, length: int) -> "FeatureSequence":
        return self.with_frames(self.frames[start:start + length])


def serialize_sequence(seq: FeatureSequence) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, len(seq), FEATURE_DIM, seq.fps)
    return header + np.ascontiguousarray(seq.frames, dtype="<f4").tobytes()


def parse_sequence(data: bytes, **labels) -> FeatureSequence:
    """Decode an IDRF byte stream. ``labels`` are forwarded to FeatureSequence."""
    data = bytes(data)
    if not MAGIC.startswith(data[:4]):
        raise FormatError(f"bad magic {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise TruncationError(f"header needs {_HEADER.size} bytes, got {len(data)}")
    magic, version, count, dim, fps = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dim != FEATURE_DIM:
        raise DimensionError(f"dim field is {dim}, expected {FEATURE_DIM}")
    need = _HEADER.size + count * dim * 4
    if len(data) < need:
        raise TruncationError(f"payload truncated: {len(data)} of {need} bytes")
    if len(data) > need:
        raise FormatError(f"{len(data) - need} trailing bytes after payload")
    payload = np.frombuffer(data, dtype="<f4", count=count * dim, offset=_HEADER.size)
    if not np.all(np.isfinite(payload)):
        raise FormatError("payload contains non-finite values")
    return FeatureSequence(payload.reshape(count, dim).astype(np.float64), fps=float(fps), **labels)


def write_sequence(path, seq: FeatureSequence) -> None:
    Path(path).write_bytes(serialize_sequence(seq))


def read_sequence(path, **labels) -> FeatureSequence:
    return parse_sequence(Path(path).read_bytes(), **labels)


def mean_feature(seqs: Sequence[FeatureSequence]) -> FeatureFrame:
    """Frame-weighted mean over every frame of every sequence of one identity."""
    seqs = list(seqs)
    if not seqs:
        raise EmptyInputError("mean_feature needs at least one sequence")
    ids = {s.identity_id for s in seqs}
    if len(ids) > 1:
        raise IdentityMismatchError(f"sequences span identities {sorted(map(str, ids))}")
    stacked = np.concatenate([s.frames for s in seqs], axis=0)
    # sort before summing so the result does not depend on frame/sequence order
    stacked = np.sort(stacked, axis=0)
    return FeatureFrame(np.sum(stacked, axis=0) / stacked.shape[0])


# --- manifests -----------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRecord:
    path: str
    identity_id: str
    video_id: str
    context: str = ""


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple = ()
    root: Optional[Path] = field(default=None, compare=False)

    def __post_init__(self):
        recs = tuple(self.records)
        seen = set()
        for r in recs:
            key = (r.identity_id, r.video_id)
            if key in seen:
                raise DataError(f"duplicate (identity, video) pair {key}")
            seen.add(key)
        object.__setattr__(self, "records", recs)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, record: ManifestRecord) -> Path:
        p = Path(record.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def load(self, record: ManifestRecord) -> FeatureSequence:
        return read_sequence(self.resolve(record), identity_id=record.identity_id,
                             video_id=record.video_id, context=record.context)

    def by_identity(self) -> dict:
        out: dict = {}
        for r in self.records:
            out.setdefault(r.identity_id, []).append(r)
        return out

    def identities(self) -> list:
        return sorted(self.by_identity())


def format_manifest(records: Iterable[ManifestRecord]) -> str:
    lines = []
    for r in records:
        fields = (r.path, r.identity_id, r.video_id, r.context)
        if any("\t" in f or "\n" in f for f in fields):
            raise ValueError(f"manifest field contains a tab or newline: {fields}")
        lines.append("\t".join(fields))
    return "".join(line + "\n" for line in lines)


def parse_manifest(text: str, root=None) -> DatasetManifest:
    records = []
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(f"manifest line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
        records.append(ManifestRecord(*parts))
    return DatasetManifest(tuple(records), root=Path(root) if root is not None else None)


def write_manifest(path, manifest_or_records) -> None:
    recs = manifest_or_records.records if isinstance(manifest_or_records, DatasetManifest) else manifest_or_records
    Path(path).write_text(format_manifest(recs), encoding="utf-8", newline="\n")


def read_manifest(path) -> DatasetManifest:
    """Relative paths inside the manifest resolve against its directory."""
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), root=path.parent)


def load_all(manifest: DatasetManifest) -> list:
    return [manifest.load(r) for r in manifest]
