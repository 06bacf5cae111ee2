"""The desk-scale end-to-end run: render a benchmark, train both phases, evaluate.

Used by the acceptance suite and by ``scripts/run_desk.py``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import identifier, synthetic, trainer
from .features import load_all
from .synthetic import WorldParams
from .trainer import TrainConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskSetup:
    n_ids: int = 16
    vids_per_id: int = 8
    frames: int = 200
    n_val_ids: int = 8
    n_test_ids: int = 8
    test_real_per_id: int = 8
    test_fake_per_id: int = 8
    world_seed: int = 7
    world: WorldParams = field(default_factory=WorldParams)
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class DeskRun:
    setup: DeskSetup
    bench: synthetic.Benchmark
    phase1: trainer.Phase1Result
    phase2: Optional[trainer.Phase2Result]
    report_phase1: identifier.EvaluationReport
    report: Optional[identifier.EvaluationReport]
    seconds_phase1: float
    seconds_phase2: float


def build(setup: DeskSetup, out_dir) -> synthetic.Benchmark:
    return synthetic.build_benchmark(
        out_dir, n_ids=setup.n_ids, vids_per_id=setup.vids_per_id, T=setup.frames,
        seed=setup.world_seed, n_val_ids=setup.n_val_ids, n_test_ids=setup.n_test_ids,
        test_real_per_id=setup.test_real_per_id, test_fake_per_id=setup.test_fake_per_id,
        params=setup.world)


def evaluate(params, cfg: TrainConfig, bench: synthetic.Benchmark, stats) -> identifier.EvaluationReport:
    labels = {l.video_id: (l.label, l.manipulation) for l in bench.labels}
    return identifier.evaluate_benchmark(params, cfg.tid, load_all(bench.references),
                                         load_all(bench.test), labels, stats)


def run(setup: DeskSetup, out_dir, adversarial: bool = True, save: bool = True) -> DeskRun:
    out = Path(out_dir)
    bench = build(setup, out / "data")
    cfg = setup.train
    train = trainer.FeaturePool.from_manifest(bench.train)
    val = trainer.FeaturePool.from_manifest(bench.val)

    t0 = time.perf_counter()
    p1 = trainer.train_phase1(train, val, cfg)
    t1 = time.perf_counter()
    rep1 = evaluate(p1.params, cfg, bench, p1.stats)
    log.info("phase 1: %.0fs, best epoch %d, val acc %.4f, AUC %.4f",
             t1 - t0, p1.best_epoch, p1.best_acc, rep1.auc)
    p2, rep2, t2 = None, None, t1
    if adversarial:
        p2 = trainer.train_phase2(train, val, p1.params, cfg, stats=p1.stats)
        t2 = time.perf_counter()
        rep2 = evaluate(p2.tid_params, cfg, bench, p2.stats)
        log.info("phase 2: %.0fs, AUC %.4f", t2 - t1, rep2.auc)
    if save:
        models = out / "models"
        models.mkdir(parents=True, exist_ok=True)
        trainer.save_model(models / "tid_best", p1.params, cfg.tid, p1.stats)
        p1.log.save(models / "train_log_phase1.tsv")
        if p2 is not None:
            trainer.save_model(models / "tid_final", p2.tid_params, cfg.tid, p2.stats)
            trainer.save_model(models / "generator", p2.gen_params, cfg.gen)
            p2.log.save(models / "train_log_phase2.tsv")
        final = rep2 or rep1
        groups = [f"{t}:{m}" for t, m in zip(final.truth, final.manipulations)]
        (models / "distances.tsv").write_text(identifier.export_distances(final.verdicts, groups),
                                              encoding="utf-8")
    return DeskRun(setup, bench, p1, p2, rep1, rep2, t1 - t0, t2 - t1)


def epoch_means(tlog: trainer.TrainLog, column: str, phase: int) -> np.ndarray:
    """Per-epoch mean of a logged loss."""
    rows = [r for r in tlog.iterations(phase) if r[column] is not None]
    epochs = sorted({r["epoch"] for r in rows})
    return np.array([np.mean([r[column] for r in rows if r["epoch"] == e]) for e in epochs])
