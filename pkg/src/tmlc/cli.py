"""Command-line entry point.

    tmlc <subcommand> [--config PATH] [--seed N] [--out DIR] [options]

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .basemodel import TrainingDiverged
from .datagen import ConfigError, FormatError, save_jsonl
from .evalharness import (ExperimentConfig, MetricsReport, ablation_seed, baseline_seed, load_snapshots,
                          meta_test_seed, meta_train_seed, report, transfer_grid, write_summary)
from .gradsuite import TOLERANCE, run_suite

COMMANDS = ("meta-train", "meta-test", "baseline", "ablate", "transfer", "gradcheck", "gen-data", "report")

log = logging.getLogger("tmlc")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; this tool reserves 2 for runtime failures
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int, help="run this single seed instead of the config's seed list")
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")
    common.add_argument("--jobs", type=int, default=1, help="parallel grid cells (transfer)")
    common.add_argument("--mode", choices=("standard", "agnostic"), help="corrector decoder mode")
    common.add_argument("--meta-supervision", choices=("softened_noisy", "clean_meta"),
                        help="meta-loss target on the query set")
    common.add_argument("--lookahead", action="store_true", help="use the one-step lookahead outer update")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="tmlc", description="Meta-learned label correction on synthetic noisy-label tasks.")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    sub.required = True
    sub.add_parser("meta-train", parents=[common], help="meta-train the corrector; writes logs and snapshots")
    p = sub.add_parser("meta-test", parents=[common], help="train a fresh model with frozen snapshots")
    p.add_argument("--snapshots", type=Path, help="directory of phi_e*.json files ({seed} is expanded)")
    sub.add_parser("baseline", parents=[common], help="run the config's reference method")
    sub.add_parser("ablate", parents=[common], help="run the corrector ablations")
    sub.add_parser("transfer", parents=[common], help="source x target transfer grid")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every operation")
    p.add_argument("--instances", type=int, default=20, help="random instances per case")
    p = sub.add_parser("gen-data", parents=[common], help="write the noisy training set and test set as JSON lines")
    p = sub.add_parser("report", parents=[common], help="aggregate run CSVs into a mean/std table")
    p.add_argument("--dir", type=Path, required=True, help="directory holding run logs")
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig.from_dict({})
    changes = {}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if args.out is not None:
        changes["out"] = str(args.out)
    if args.mode:
        changes["meta.mode"] = args.mode
    if args.meta_supervision:
        changes["meta.meta_supervision"] = args.meta_supervision
    if args.lookahead:
        changes["meta.lookahead"] = True
    return cfg.override(**changes) if changes else cfg


def _per_seed(cfg: ExperimentConfig, run) -> MetricsReport:
    rep = MetricsReport()
    for seed in cfg.seeds:
        rep.add(seed, **run(seed))
        log.info("seed %d done", seed)
    return rep


def cmd_meta_train(args, cfg, started):
    rep = _per_seed(cfg, lambda s: meta_train_seed(cfg, s, cfg.out)[1])
    path = write_summary(cfg, rep, cfg.out, started)
    print(f"meta-train: test accuracy {rep.mean('accuracy'):.4f}, corrected-label accuracy "
          f"{rep.mean('corrected_label_accuracy'):.4f}; summary in {path}")


def cmd_meta_test(args, cfg, started):
    template = str(args.snapshots or cfg.doc["meta_test"]["snapshot_dir"] or "")
    if not template:
        raise ConfigError("meta-test needs --snapshots or meta_test.snapshot_dir")

    def run(seed):
        snaps = load_snapshots(template.replace("{seed}", str(seed)))
        return meta_test_seed(cfg, seed, snaps, cfg.out)[1]

    rep = _per_seed(cfg, run)
    path = write_summary(cfg, rep, cfg.out, started)
    print(f"meta-test: test accuracy {rep.mean('accuracy'):.4f}; summary in {path}")


def cmd_baseline(args, cfg, started):
    rep = _per_seed(cfg, lambda s: baseline_seed(cfg, s, cfg.out)[1])
    path = write_summary(cfg, rep, cfg.out, started)
    print(f"baseline {cfg.method_spec().kind}: test accuracy {rep.mean('accuracy'):.4f}; summary in {path}")


def cmd_ablate(args, cfg, started):
    reports = {}
    for kind in cfg.doc["ablations"]:
        reports[kind] = _per_seed(cfg, lambda s, k=kind: ablation_seed(cfg, s, k, cfg.out)[1])
    path = write_summary(cfg, {k: r.to_dict() for k, r in reports.items()}, cfg.out, started)
    for kind, rep in reports.items():
        print(f"{kind:<14} test accuracy {rep.mean('accuracy'):.4f}  "
              f"corrected-label accuracy {rep.mean('corrected_label_accuracy'):.4f}")
    print(f"summary in {path}")


def cmd_transfer(args, cfg, started):
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    grid = transfer_grid(cfg, jobs=args.jobs, out=cfg.out)
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "transfer_accuracy.csv").write_text(grid.accuracy_table())
    path = write_summary(cfg, grid.to_dict(), cfg.out, started)
    print(grid.accuracy_table(), end="")
    print(f"summary in {path}")


def cmd_gradcheck(args, cfg, started):
    results = run_suite(args.instances)
    for name, err in results.items():
        print(f"{name:<32} {err:.3e}")
    worst = max(results.values())
    print(f"max relative error {worst:.3e} over {args.instances} instances per case (tolerance {TOLERANCE:g})")
    return 0 if worst <= TOLERANCE else 2


def cmd_gen_data(args, cfg, started):
    cfg.out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        train, test = cfg.task(seed)
        save_jsonl(train, cfg.out / f"train_seed{seed}.jsonl")
        if test is not None:
            save_jsonl(test, cfg.out / f"test_seed{seed}.jsonl")
        print(f"seed {seed}: {len(train)} training samples, noisy-label accuracy {train.noisy_accuracy():.4f}")


def cmd_report(args, cfg, started):
    table_csv, text = report(args.dir)
    (args.dir / "report.csv").write_text(table_csv)
    (args.dir / "report.txt").write_text(text)
    print(text, end="")


HANDLERS = {
    "meta-train": cmd_meta_train, "meta-test": cmd_meta_test, "baseline": cmd_baseline, "ablate": cmd_ablate,
    "transfer": cmd_transfer, "gradcheck": cmd_gradcheck, "gen-data": cmd_gen_data, "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    started = time.perf_counter()
    try:
        cfg = load_config(args)
        code = HANDLERS[args.command](args, cfg, started)
    except (ConfigError, FormatError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, ArithmeticError, RuntimeError, OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
