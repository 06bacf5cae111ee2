"""Batch sampling and the two-phase training schedule.

Phase 1 trains the temporal network alone on the reconstruction loss and
keeps the epoch with the best validation identification accuracy.  Phase 2
switches the generator on; every iteration first updates the temporal network
on ``rec + lambda_inv * inv`` and then the generator on
``adv + lambda_cycle * cycle``, regenerating the fake features in between.

Iteration ``n`` of phase ``p`` draws its batch from ``default_rng([seed, p, n])``,
so a run resumed from an epoch checkpoint replays exactly.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import generator as gen_net
from . import losses
from . import tid_net
from .autodiff import AdamState, ParamSet
from .errors import ConfigError, DataError, DivergenceError
from .features import FEATURE_DIM, DatasetManifest, FeatureSequence, load_all
from .generator import GenConfig
from .tid_net import TidConfig

log = logging.getLogger(__name__)

DESK_TID = TidConfig(hidden_channels=64, groupnorm_groups=8)
DESK_GEN = GenConfig(hidden_channels=64, groupnorm_groups=8)


@dataclass(frozen=True)
class TrainConfig:
    n_ids: int = 4
    n_videos: int = 4
    frames: int = 64
    lr_tid: float = 1e-3
    lr_gen: float = 1e-3
    lambda_cycle: float = 1.0
    lambda_inv: float = 0.001
    tau: float = 0.08
    phase1_epochs: int = 30
    phase2_epochs: int = 10
    iterations_per_epoch: int = 50
    val_batches: int = 16
    sources_per_pair: int = 1
    seed: int = 0
    tid: TidConfig = DESK_TID
    gen: GenConfig = DESK_GEN

    @classmethod
    def full(cls, **overrides) -> "TrainConfig":
        base = cls(n_ids=8, n_videos=8, frames=96, lr_tid=1e-4, lr_gen=1e-5, phase1_epochs=300, phase2_epochs=100,
                   iterations_per_epoch=2500, sources_per_pair=8, tid=TidConfig(), gen=GenConfig())
        return replace(base, **overrides)

    def validate(self) -> None:
        if self.n_ids < 2 or self.n_videos < 2 or self.frames < 1:
            raise ConfigError("need n_ids >= 2, n_videos >= 2 and frames >= 1")
        for name in ("lr_tid", "lr_gen", "tau"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lambda_cycle", "lambda_inv"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        self.tid.validate()
        self.gen.validate()

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name in ("tid", "gen"):
                continue
            lines.append(f"{f.name}={getattr(self, f.name)!r}")
        lines += [f"tid.{l}" for l in self.tid.to_text().splitlines()]
        lines += [f"gen.{k}={v!r}" for k, v in asdict(self.gen).items()]
        return "\n".join(lines) + "\n"


# --- feature standardisation ---------------------------------------------------

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_sequences(cls, seqs) -> "FeatureStats":
        x = np.concatenate([s.frames for s in seqs], axis=0)
        return cls(x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR))

    def apply(self, frames: np.ndarray) -> np.ndarray:
        return (frames - self.mean) / np.maximum(self.std, STD_FLOOR)

    def invert(self, frames: np.ndarray) -> np.ndarray:
        return frames * np.maximum(self.std, STD_FLOOR) + self.mean

    def tensors(self) -> dict:
        return {"feature_stats.mean": self.mean, "feature_stats.std": self.std}


def standardize(seq: FeatureSequence, stats: FeatureStats) -> FeatureSequence:
    return seq.with_frames(stats.apply(seq.frames))


def destandardize(seq: FeatureSequence, stats: FeatureStats) -> FeatureSequence:
    return seq.with_frames(stats.invert(seq.frames))


# --- data ------------------------------------------------------------------------

class FeaturePool:
    """In-memory sequences grouped by identity, in sorted identity order."""

    def __init__(self, seqs):
        self.by_id: dict = {}
        for s in seqs:
            self.by_id.setdefault(s.identity_id, []).append(s)
        for v in self.by_id.values():
            v.sort(key=lambda s: s.video_id)
        self.ids = sorted(self.by_id)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "FeaturePool":
        return cls(load_all(manifest))

    def sequences(self):
        return [s for i in self.ids for s in self.by_id[i]]


def as_pool(data) -> FeaturePool:
    if isinstance(data, FeaturePool):
        return data
    if isinstance(data, DatasetManifest):
        return FeaturePool.from_manifest(data)
    return FeaturePool(list(data))


@dataclass
class TrainingBatch:
    x: np.ndarray  # (N, M, T, 62)
    identity_ids: list
    video_ids: list  # N lists of M ids
    offsets: np.ndarray  # (N, M)


def sample_batch(data, cfg: TrainConfig, rng, stats: Optional[FeatureStats] = None) -> TrainingBatch:
    """N distinct identities, M distinct videos each, one random T-frame window per video."""
    pool = as_pool(data)
    N, M, T = cfg.n_ids, cfg.n_videos, cfg.frames
    eligible = [i for i in pool.ids if sum(len(s) >= T for s in pool.by_id[i]) >= M]
    if len(pool.ids) < N:
        raise DataError(f"need {N} identities, dataset has {len(pool.ids)}")
    if len(eligible) < N:
        raise DataError(f"need {N} identities with >= {M} videos of >= {T} frames, found {len(eligible)}")
    chosen = [eligible[i] for i in rng.choice(len(eligible), size=N, replace=False)]
    x = np.empty((N, M, T, FEATURE_DIM))
    vids, offsets = [], np.empty((N, M), dtype=np.int64)
    for a, ident in enumerate(chosen):
        long_enough = [s for s in pool.by_id[ident] if len(s) >= T]
        picks = rng.choice(len(long_enough), size=M, replace=False)
        row = []
        for b, p in enumerate(picks):
            s = long_enough[p]
            off = int(rng.integers(0, len(s) - T + 1))
            frames = s.frames[off:off + T]
            x[a, b] = stats.apply(frames) if stats is not None else frames
            offsets[a, b] = off
            row.append(s.video_id)
        vids.append(row)
    return TrainingBatch(x, chosen, vids, offsets)


def batch_rng(seed: int, phase: int, iteration: int):
    return np.random.default_rng([seed, phase, iteration])


def validation_batches(val, cfg: TrainConfig, stats: FeatureStats) -> list:
    pool = as_pool(val)
    vcfg = replace(cfg, n_ids=min(cfg.n_ids, len(pool.ids)))
    return [sample_batch(pool, vcfg, np.random.default_rng([cfg.seed, 99, b]), stats)
            for b in range(cfg.val_batches)]


def validation_accuracy(params, batches, cfg: TrainConfig) -> float:
    accs = []
    for b in batches:
        N, M, T, _ = b.x.shape
        y = tid_net.embed_batch(params, b.x.reshape(N * M, T, FEATURE_DIM), cfg.tid)
        accs.append(losses.identification_accuracy(y.reshape(N, M, T, -1), cfg.tau))
    return float(np.mean(accs))


# --- logs --------------------------------------------------------------------------

LOG_COLUMNS = ("phase", "epoch", "iteration", "l_rec", "l_cycle", "l_adv", "l_inv", "val_acc")


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def add(self, **rec):
        self.records.append({c: rec.get(c) for c in LOG_COLUMNS})

    def iterations(self, phase=None):
        return [r for r in self.records if r["val_acc"] is None and (phase is None or r["phase"] == phase)]

    def validations(self, phase=None):
        return [r for r in self.records if r["val_acc"] is not None and (phase is None or r["phase"] == phase)]

    def column(self, name, phase=None):
        return np.array([r[name] for r in self.iterations(phase) if r[name] is not None])

    def to_tsv(self) -> str:
        def fmt(v):
            if v is None:
                return ""
            return repr(float(v)) if isinstance(v, float) else str(v)
        rows = ["\t".join(LOG_COLUMNS)]
        rows += ["\t".join(fmt(r[c]) for c in LOG_COLUMNS) for r in self.records]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> "TrainLog":
        lines = text.splitlines()
        if not lines or tuple(lines[0].split("\t")) != LOG_COLUMNS:
            raise ValueError("not a training log")
        out = cls()
        for line in lines[1:]:
            vals = line.split("\t")
            rec = {}
            for c, v in zip(LOG_COLUMNS, vals):
                if v == "":
                    rec[c] = None
                elif c in ("phase", "epoch", "iteration"):
                    rec[c] = int(v)
                else:
                    rec[c] = float(v)
            out.records.append(rec)
        return out

    def save(self, path):
        Path(path).write_text(self.to_tsv(), encoding="utf-8", newline="\n")


# --- model bundles -------------------------------------------------------------

def save_model(prefix, params: ParamSet, cfg, stats: Optional[FeatureStats] = None) -> None:
    extra = stats.tensors() if stats is not None else None
    prefix = Path(prefix)
    tensors = dict(params.arrays())
    if extra:
        tensors.update(extra)
    ad.save_checkpoint(prefix.with_suffix(".idrc"), tensors)
    text = cfg.to_text() if isinstance(cfg, TidConfig) else "".join(
        f"{k}={v!r}\n" for k, v in asdict(cfg).items())
    prefix.with_suffix(".cfg").write_text(text, encoding="utf-8")


def load_model(prefix):
    """Return (params, TidConfig, FeatureStats or None) for a temporal-network bundle."""
    prefix = Path(prefix)
    if prefix.suffix in (".idrc", ".cfg"):
        prefix = prefix.with_suffix("")
    tensors = ad.load_checkpoint(prefix.with_suffix(".idrc"))
    cfg = TidConfig.from_text(prefix.with_suffix(".cfg").read_text(encoding="utf-8"))
    stats = None
    if "feature_stats.mean" in tensors:
        stats = FeatureStats(tensors.pop("feature_stats.mean"), tensors.pop("feature_stats.std"))
    return ParamSet(tensors), cfg, stats


def _pack_state(nets: dict, adams: dict, meta: dict) -> dict:
    out = {}
    for net, params in nets.items():
        for n, t in params.items():
            out[f"{net}/{n}"] = t.data
    for net, st in adams.items():
        for n in st.m:
            out[f"adam.{net}.m/{n}"] = st.m[n]
            out[f"adam.{net}.v/{n}"] = st.v[n]
        out[f"adam.{net}.t"] = np.array(float(st.t))
    for k, v in meta.items():
        out[f"meta/{k}"] = np.array(float(v))
    return out


def _unpack_state(tensors: dict):
    nets, adams, meta = {}, {}, {}
    for key, arr in tensors.items():
        head, _, name = key.partition("/")
        if head == "meta":
            meta[name] = float(arr)
        elif head.startswith("adam."):
            _, net, part = (head.split(".") + [""])[:3]
            st = adams.setdefault(net, AdamState())
            if part == "t" or (not name and head.endswith(".t")):
                st.t = int(arr)
            elif part == "m":
                st.m[name] = np.array(arr)
            elif part == "v":
                st.v[name] = np.array(arr)
        else:
            nets.setdefault(head, {})[name] = np.array(arr)
    return {k: ParamSet(v) for k, v in nets.items()}, adams, meta


def save_state(path, nets: dict, adams: dict, meta: dict) -> None:
    ad.save_checkpoint(path, _pack_state(nets, adams, meta))


def load_state(path):
    return _unpack_state(ad.load_checkpoint(path))


# --- training steps ------------------------------------------------------------------

def _finite(value, what, last_good):
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite {what}: {value}", last_good=last_good)


def phase1_step(params: ParamSet, adam: AdamState, x: np.ndarray, cfg: TrainConfig) -> float:
    """One metric-learning update on a standardised (N, M, T, 62) batch."""
    N, M, T, _ = x.shape
    y = tid_net.forward(params, x.reshape(N * M, T, FEATURE_DIM), cfg.tid)
    rec = losses.nll_from_log(losses.batch_log_probabilities(y.reshape(N, M, T, -1), cfg.tau))
    value = rec.item()
    _finite(value, "L_rec", params)
    ad.backward(rec)
    ad.adam_step(params, adam, cfg.lr_tid)
    params.zero_grad()
    return value


def generation_grid(N: int, M: int, per_pair: int | None = None):
    """(target c, source identity k, source video j) triples, k != c.

    ``per_pair`` source videos of each other identity are used per target,
    rotating with c so that different targets borrow different videos.
    """
    per_pair = M if per_pair is None else min(per_pair, M)
    return [(c, k, (c + s) % M) for c in range(N) for k in range(N) if k != c
            for s in range(per_pair)]


def phase2_step(tid_params: ParamSet, gen_params: ParamSet, adam_tid: AdamState,
                adam_gen: AdamState, x: np.ndarray, cfg: TrainConfig,
                update_gen: bool = True) -> dict:
    N, M, T, C = x.shape
    means = x.reshape(N, M * T, C).mean(axis=1)
    grid = np.array(generation_grid(N, M, cfg.sources_per_pair))
    tgt, src_id, src_vid = grid[:, 0], grid[:, 1], grid[:, 2]
    src = x[src_id, src_vid]
    real = x.reshape(N * M, T, C)

    # temporal network: separate real identities, push generated features away
    with ad.no_grad():
        fake = gen_net.forward(gen_params, src, means[tgt], cfg.gen).data
    y_all = tid_net.forward(tid_params, np.concatenate([real, fake]), cfg.tid)
    y_real = y_all[:N * M].reshape(N, M, T, -1)
    y_fake = y_all[N * M:]
    rec = losses.nll_from_log(losses.batch_log_probabilities(y_real, cfg.tau))
    inv = losses.inv_from_log(losses.adv_log_probabilities(y_fake, tgt, y_real, cfg.tau))
    l_nt = losses.total_tid_loss(rec, inv, cfg.lambda_inv)
    out = {"l_rec": rec.item(), "l_inv": inv.item()}
    _finite(l_nt.item(), "L_NT", tid_params)
    ad.backward(l_nt)
    ad.adam_step(tid_params, adam_tid, cfg.lr_tid)
    tid_params.zero_grad()
    if not update_gen:
        return out

    # generator: fool the (just updated, now frozen) temporal network
    frozen = tid_params.frozen()
    with ad.no_grad():
        y_real = tid_net.forward(frozen, real, cfg.tid).data.reshape(N, M, T, -1)
    fake = gen_net.forward(gen_params, src, means[tgt], cfg.gen)
    y_fake = tid_net.forward(frozen, fake, cfg.tid)
    adv = losses.nll_from_log(losses.adv_log_probabilities(y_fake, tgt, y_real, cfg.tau))
    cycle = losses.cycle_loss(lambda f, m: gen_net.forward(gen_params, f, m, cfg.gen),
                              src, means[tgt], means[src_id])
    l_ng = losses.total_generator_loss(adv, cycle, cfg.lambda_cycle)
    out.update(l_adv=adv.item(), l_cycle=cycle.item())
    _finite(l_ng.item(), "L_NG", gen_params)
    ad.backward(l_ng)
    ad.adam_step(gen_params, adam_gen, cfg.lr_gen)
    gen_params.zero_grad()
    return out


# --- phases ---------------------------------------------------------------------------

@dataclass
class Phase1Result:
    params: ParamSet
    log: TrainLog
    stats: FeatureStats
    best_epoch: int
    best_acc: float
    final_params: ParamSet = None
    adam: AdamState = None


def train_phase1(train, val, cfg: TrainConfig, stats: Optional[FeatureStats] = None,
                 resume: Optional[str] = None, state_path: Optional[str] = None,
                 prior_log: Optional[TrainLog] = None, stop_after: Optional[int] = None) -> Phase1Result:
    """Train the temporal network alone; return the best-validation checkpoint.

    ``state_path`` receives a resumable state after every epoch; ``resume``
    continues from such a file.  ``stop_after`` ends the run after that many
    epochs (used to interrupt runs on purpose).
    """
    cfg.validate()
    train, val = as_pool(train), as_pool(val)
    stats = stats or FeatureStats.from_sequences(train.sequences())
    vb = validation_batches(val, cfg, stats)
    tlog = prior_log if prior_log is not None else TrainLog()
    I = cfg.iterations_per_epoch

    if resume:
        nets, adams, meta = load_state(resume)
        params, adam, best = nets["tid"], adams["tid"], nets["best"]
        start, best_acc, best_epoch = int(meta["epoch"]) + 1, meta["best_acc"], int(meta["best_epoch"])
    else:
        params = tid_net.init(cfg.tid, cfg.seed)
        adam = AdamState()
        best_acc = validation_accuracy(params, vb, cfg)
        best, best_epoch, start = params.copy(), 0, 1
        tlog.add(phase=1, epoch=0, iteration=0, val_acc=best_acc)

    for epoch in range(start, cfg.phase1_epochs + 1):
        if stop_after is not None and epoch > stop_after:
            break
        for it in range(I):
            n = (epoch - 1) * I + it
            batch = sample_batch(train, cfg, batch_rng(cfg.seed, 1, n), stats)
            try:
                value = phase1_step(params, adam, batch.x, cfg)
            except DivergenceError as e:
                raise DivergenceError(str(e), last_good=best) from None
            tlog.add(phase=1, epoch=epoch, iteration=n + 1, l_rec=value)
        acc = validation_accuracy(params, vb, cfg)
        tlog.add(phase=1, epoch=epoch, iteration=epoch * I, val_acc=acc)
        log.info("phase1 epoch %d  L_rec %.3f  val_acc %.4f", epoch, value, acc)
        if acc >= best_acc:
            best_acc, best, best_epoch = acc, params.copy(), epoch
        if state_path:
            save_state(state_path, {"tid": params, "best": best}, {"tid": adam},
                       {"epoch": epoch, "best_acc": best_acc, "best_epoch": best_epoch})
    return Phase1Result(best, tlog, stats, best_epoch, best_acc, final_params=params, adam=adam)


@dataclass
class Phase2Result:
    tid_params: ParamSet
    gen_params: ParamSet
    log: TrainLog
    stats: FeatureStats


def train_phase2(train, val, tid_params: ParamSet, cfg: TrainConfig,
                 stats: Optional[FeatureStats] = None, gen_params: Optional[ParamSet] = None,
                 log_: Optional[TrainLog] = None) -> Phase2Result:
    """Joint adversarial fine-tuning for a fixed number of epochs (no selection)."""
    cfg.validate()
    train, val = as_pool(train), as_pool(val)
    stats = stats or FeatureStats.from_sequences(train.sequences())
    vb = validation_batches(val, cfg, stats)
    tlog = log_ if log_ is not None else TrainLog()
    tid_params = tid_params.copy()
    gen_params = gen_params.copy() if gen_params is not None else gen_net.init(cfg.gen, cfg.seed + 1)
    adam_t, adam_g = AdamState(), AdamState()
    I = cfg.iterations_per_epoch
    tlog.add(phase=2, epoch=0, iteration=0, val_acc=validation_accuracy(tid_params, vb, cfg))
    for epoch in range(1, cfg.phase2_epochs + 1):
        for it in range(I):
            n = (epoch - 1) * I + it
            batch = sample_batch(train, cfg, batch_rng(cfg.seed, 2, n), stats)
            vals = phase2_step(tid_params, gen_params, adam_t, adam_g, batch.x, cfg)
            tlog.add(phase=2, epoch=epoch, iteration=n + 1, **vals)
        acc = validation_accuracy(tid_params, vb, cfg)
        tlog.add(phase=2, epoch=epoch, iteration=epoch * I, val_acc=acc)
        log.info("phase2 epoch %d  L_rec %.3f  L_adv %.3f  L_cycle %.4f  val_acc %.4f",
                 epoch, vals["l_rec"], vals["l_adv"], vals["l_cycle"], acc)
    return Phase2Result(tid_params, gen_params, tlog, stats)
