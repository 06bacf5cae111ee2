"""Command-line entry point: ``idreveal {gen-data,train,verify,evaluate}``.

Exit codes: 0 success (or REAL), 3 FAKE, 2 usage error, 1 runtime error.
Results go to stdout as ``key<TAB>value`` lines.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import generator as gen_net
from . import identifier, synthetic, trainer
from .errors import IDRevealError
from .features import load_all, read_manifest, read_sequence

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_FAKE = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _emit(key, value):
    print(f"{key}\t{value}")


def _require_files(*paths):
    missing = [str(p) for p in paths if p is not None and not Path(p).exists()]
    if missing:
        raise FileNotFoundError(f"missing file(s): {', '.join(missing)}")


def _model_files(prefix):
    prefix = Path(prefix)
    if prefix.suffix in (".idrc", ".cfg"):
        prefix = prefix.with_suffix("")
    return prefix.with_suffix(".idrc"), prefix.with_suffix(".cfg")


# --- gen-data ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    contexts = tuple(c for c in args.contexts.split(",") if c)
    bm = synthetic.build_benchmark(
        args.out, n_ids=args.ids, vids_per_id=args.vids, T=args.frames, contexts=contexts,
        seed=args.seed, n_val_ids=args.val_ids, n_test_ids=args.test_ids,
        test_real_per_id=args.test_real, test_fake_per_id=args.test_fake, jobs=args.jobs)
    out = Path(args.out)
    _emit("train_videos", len(bm.train))
    _emit("val_videos", len(bm.val))
    _emit("reference_videos", len(bm.references))
    _emit("test_videos", len(bm.test))
    for name in ("train", "val", "references", "test"):
        _emit(f"{name}_manifest", out / f"{name}.tsv")
    _emit("test_labels", out / "test_labels.tsv")
    return EXIT_OK


# --- train -------------------------------------------------------------------------

def train_config_from_args(args) -> trainer.TrainConfig:
    cfg = trainer.TrainConfig.full() if args.preset == "full" else trainer.TrainConfig()
    overrides = {
        "n_ids": args.n_ids, "n_videos": args.n_videos, "frames": args.train_frames,
        "lr_tid": args.lr_tid, "lr_gen": args.lr_gen, "lambda_cycle": args.lambda_cycle,
        "lambda_inv": args.lambda_inv, "tau": args.tau, "phase1_epochs": args.phase1_epochs,
        "phase2_epochs": args.phase2_epochs, "iterations_per_epoch": args.iters_per_epoch,
        "val_batches": args.val_batches, "seed": args.seed,
    }
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    if args.hidden is not None or args.groups is not None:
        h = args.hidden if args.hidden is not None else cfg.tid.hidden_channels
        g = args.groups if args.groups is not None else cfg.tid.groupnorm_groups
        cfg = replace(cfg, tid=replace(cfg.tid, hidden_channels=h, groupnorm_groups=g),
                      gen=replace(cfg.gen, hidden_channels=h, groupnorm_groups=g))
    return cfg


def cmd_train(args) -> int:
    _require_files(args.train, args.val, args.resume)
    cfg = train_config_from_args(args)
    cfg.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = trainer.FeaturePool.from_manifest(read_manifest(args.train))
    val = trainer.FeaturePool.from_manifest(read_manifest(args.val))
    log_path = out / "train_log.tsv"
    prior = None
    if args.resume:
        _, _, meta = trainer.load_state(args.resume)
        done = int(meta["epoch"])
        prior = trainer.TrainLog()
        if log_path.exists():
            old = trainer.TrainLog.from_tsv(log_path.read_text(encoding="utf-8"))
            prior.records = [r for r in old.records if r["phase"] == 1 and r["epoch"] <= done]
    (out / "train_config.txt").write_text(cfg.to_text(), encoding="utf-8")

    p1 = trainer.train_phase1(train, val, cfg, resume=args.resume,
                              state_path=out / "state_phase1.idrc", prior_log=prior,
                              stop_after=args.stop_after)
    p1.log.save(log_path)
    trainer.save_model(out / "tid_best", p1.params, cfg.tid, p1.stats)
    _emit("best_epoch", p1.best_epoch)
    _emit("best_val_acc", repr(p1.best_acc))
    _emit("tid_checkpoint", out / "tid_best.idrc")
    finished = args.stop_after is None or args.stop_after >= cfg.phase1_epochs
    if args.adversarial and finished:
        p2 = trainer.train_phase2(train, val, p1.params, cfg, stats=p1.stats, log_=p1.log)
        p2.log.save(log_path)
        trainer.save_model(out / "tid_final", p2.tid_params, cfg.tid, p2.stats)
        trainer.save_model(out / "generator", p2.gen_params, cfg.gen)
        _emit("final_val_acc", repr(p2.log.validations(2)[-1]["val_acc"]))
        _emit("tid_final_checkpoint", out / "tid_final.idrc")
        _emit("generator_checkpoint", out / "generator.idrc")
    _emit("log", log_path)
    return EXIT_OK


# --- verify ------------------------------------------------------------------------

def cmd_verify(args) -> int:
    _require_files(*_model_files(args.model), args.test, *(args.refs or []), args.refs_manifest)
    if not args.refs and not args.refs_manifest:
        raise UsageError("give reference videos with --refs or --refs-manifest")
    params, cfg, stats = trainer.load_model(args.model)
    refs = [read_sequence(p, video_id=Path(p).stem) for p in (args.refs or [])]
    if args.refs_manifest:
        refs += load_all(read_manifest(args.refs_manifest))
    test = read_sequence(args.test, video_id=Path(args.test).stem)
    ref_set = identifier.ReferenceSet("", [identifier.tid_net.embed(params, r, cfg, stats) for r in refs],
                                      [r.context for r in refs])
    v = identifier.score_video(params, cfg, test, ref_set, stats, args.threshold_sq)
    _emit("verdict", v.label.value)
    _emit("distance", repr(v.distance))
    _emit("threshold_sq", repr(v.threshold_sq))
    for r, d in zip(refs, v.per_reference):
        _emit(f"ref:{r.video_id}", repr(d))
    return EXIT_FAKE if v.label is identifier.Label.FAKE else EXIT_OK


# --- evaluate ----------------------------------------------------------------------

def _read_scores(path):
    scored = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        parts = line.split("\t")
        if not line.strip() or parts[0] == "distance":
            continue
        scored.append((float(parts[0]), parts[1].strip()))
    return scored


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    if args.scores_file:
        _require_files(args.scores_file)
        scored = _read_scores(args.scores_file)
        acc, a = identifier.evaluate(scored, args.threshold_sq)
        rows = [("accuracy", acc), ("auc", a), ("n_real", sum(l.upper() != "FAKE" for _, l in scored)),
                ("n_fake", sum(l.upper() == "FAKE" for _, l in scored))]
        verdicts, groups = [], []
    else:
        needed = (args.model, args.references, args.test, args.labels)
        if any(x is None for x in needed):
            raise UsageError("--model, --references, --test and --labels are required without --scores-file")
        _require_files(*_model_files(args.model), args.references, args.test, args.labels)
        params, cfg, stats = trainer.load_model(args.model)
        refs = load_all(read_manifest(args.references))
        tests = load_all(read_manifest(args.test))
        labels = {l.video_id: (l.label, l.manipulation) for l in synthetic.read_labels(args.labels)}
        report = identifier.evaluate_benchmark(params, cfg, refs, tests, labels, stats, args.threshold_sq)
        rows = report.summary_rows()
        verdicts = report.verdicts
        groups = [f"{t}:{m}" for t, m in zip(report.truth, report.manipulations)]
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.tsv").write_text("".join(f"{k}\t{v!r}\n" for k, v in rows), encoding="utf-8")
    (out / "distances.tsv").write_text(identifier.export_distances(verdicts, groups), encoding="utf-8")
    for k, v in rows:
        _emit(k, repr(v))
    return EXIT_OK


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="idreveal",
                                description="Identity-aware fake detection on 3DMM feature sequences.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic identity benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--ids", type=int, default=16, help="training identities")
    g.add_argument("--vids", type=int, default=8, help="videos per identity")
    g.add_argument("--frames", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--val-ids", type=int, default=8)
    g.add_argument("--test-ids", type=int, default=8)
    g.add_argument("--test-real", type=int, default=8, help="held-out real videos per test identity")
    g.add_argument("--test-fake", type=int, default=8, help="fakes per test identity")
    g.add_argument("--contexts", default=",".join(synthetic.DEFAULT_CONTEXTS))
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the temporal network (and optionally the generator)")
    t.add_argument("--train", required=True, help="training manifest")
    t.add_argument("--val", required=True, help="validation manifest")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--adversarial", action="store_true", help="run the adversarial phase after phase 1")
    t.add_argument("--resume", help="phase-1 state file to continue from")
    t.add_argument("--stop-after", type=int, help="stop phase 1 after this many epochs")
    t.add_argument("--preset", choices=("desk", "full"), default="desk")
    t.add_argument("--seed", type=int)
    t.add_argument("--n-ids", type=int)
    t.add_argument("--n-videos", type=int)
    t.add_argument("--frames", dest="train_frames", type=int)
    t.add_argument("--lr-tid", type=float)
    t.add_argument("--lr-gen", type=float)
    t.add_argument("--lambda-cycle", type=float)
    t.add_argument("--lambda-inv", type=float)
    t.add_argument("--tau", type=float)
    t.add_argument("--phase1-epochs", type=int)
    t.add_argument("--phase2-epochs", type=int)
    t.add_argument("--iters-per-epoch", type=int)
    t.add_argument("--val-batches", type=int)
    t.add_argument("--hidden", type=int)
    t.add_argument("--groups", type=int)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("verify", help="verify one video against reference videos")
    v.add_argument("--model", required=True, help="model prefix or .idrc path")
    v.add_argument("--test", required=True)
    v.add_argument("--refs", nargs="+")
    v.add_argument("--refs-manifest")
    v.add_argument("--threshold-sq", type=float, default=identifier.DEFAULT_THRESHOLD_SQ)
    v.set_defaults(func=cmd_verify)

    e = sub.add_parser("evaluate", help="leave-one-context-out evaluation on a labelled test set")
    e.add_argument("--out", required=True)
    e.add_argument("--model")
    e.add_argument("--references")
    e.add_argument("--test")
    e.add_argument("--labels")
    e.add_argument("--scores-file", help="TSV of precomputed (distance, label) rows")
    e.add_argument("--threshold-sq", type=float, default=identifier.DEFAULT_THRESHOLD_SQ)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"idreveal: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (IDRevealError, OSError, ValueError) as e:
        print(f"idreveal: error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
