#!/usr/bin/env python3
"""Run the desk-scale experiment end to end and print the headline metrics."""
from __future__ import annotations

import argparse
import logging
from pathlib import Path

from idreveal import experiment


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("desk_run"))
    ap.add_argument("--no-adversarial", action="store_true", help="stop after phase 1")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    run = experiment.run(experiment.DeskSetup(), args.out, adversarial=not args.no_adversarial)
    rec = experiment.epoch_means(run.phase1.log, "l_rec", 1)
    print(f"phase 1   {run.seconds_phase1:7.0f}s  L_rec {run.phase1.log.column('l_rec', 1)[0]:.1f} -> "
          f"{rec[-1]:.2f}  best val acc {run.phase1.best_acc:.4f} (epoch {run.phase1.best_epoch})")
    print(f"          AUC {run.report_phase1.auc:.4f}  Reenactment "
          f"{run.report_phase1.auc_for('Reenactment'):.4f}  FaceSwap {run.report_phase1.auc_for('FaceSwap'):.4f}")
    if run.phase2 is not None:
        adv = experiment.epoch_means(run.phase2.log, "l_adv", 2)
        vals = run.phase2.log.validations(2)
        print(f"phase 2   {run.seconds_phase2:7.0f}s  L_adv {run.phase2.log.column('l_adv', 2)[0]:.1f} -> "
              f"{adv[-1]:.1f}  val acc {vals[0]['val_acc']:.4f} -> {vals[-1]['val_acc']:.4f}")
        print(f"          AUC {run.report.auc:.4f}  Reenactment {run.report.auc_for('Reenactment'):.4f}  "
              f"FaceSwap {run.report.auc_for('FaceSwap'):.4f}")
    print(f"models and distances written to {args.out / 'models'}")


if __name__ == "__main__":
    main()
