"""Command line driver.

    dropattention train CONFIG [--section.key=value ...]
    dropattention eval CHECKPOINT [--data FILE] [--split test]
    dropattention analyze CHECKPOINT [--data FILE] [--out-dir DIR] [--bins N]
    dropattention mask-stats --l 100 --p 0.3 --w 3 --variant element

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
``DROPATTENTION_OUT_DIR`` overrides the configured output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    collect_captures,
    compute_metrics,
    max_weight_histogram,
    write_histogram_csv,
    write_metrics_csv,
)
from .config import ExperimentConfig
from .data import DataFormatError, load_dataset
from .dropattn import DropSpec, mask_stats
from .errors import ConfigError
from .tensor import NonFiniteError
from .train import TrainingDiverged, load_checkpoint, prepare_data, save_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
OUT_DIR_ENV = "DROPATTENTION_OUT_DIR"

log = logging.getLogger("dropattention")


def _parse_overrides(extra: list[str]) -> dict:
    out = {}
    for arg in extra:
        if not arg.startswith("--") or "=" not in arg:
            raise ConfigError(f"unrecognised argument {arg!r}; overrides look like --section.key=value")
        key, value = arg[2:].split("=", 1)
        out[key] = value
    return out


def cmd_train(args, extra) -> int:
    overrides = _parse_overrides(extra)
    cfg = ExperimentConfig.load(args.config, overrides)
    if os.environ.get(OUT_DIR_ENV):
        cfg.out_dir = os.environ[OUT_DIR_ENV]
    cfg.validate()
    out = Path(cfg.out_dir)
    report, exp = train(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, exp)
    (out / "report.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    (out / "timing.json").write_text(json.dumps({"epoch_seconds": report.wall_times}) + "\n", encoding="utf-8")
    best = report.best
    print(f"best epoch {report.best_epoch}: " + ", ".join(f"{k}={v}" for k, v in best.items() if k != "epoch"))
    return EXIT_OK


def _examples(exp, data: str | None, split: str):
    if data:
        return load_dataset(exp.cfg.task, data)
    splits = prepare_data(exp.cfg)
    return getattr(splits, split)


def cmd_eval(args, extra) -> int:
    exp = load_checkpoint(args.checkpoint, _parse_overrides(extra))
    examples = _examples(exp, args.data, args.split)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["split", "metric", "value", "n"])
    w.writerow([args.data or args.split, exp.metric_name(), f"{exp.evaluate(examples):.6g}", len(examples)])
    return EXIT_OK


def cmd_analyze(args, extra) -> int:
    exp = load_checkpoint(args.checkpoint, _parse_overrides(extra))
    examples = _examples(exp, args.data, args.split)
    if not examples:
        raise ConfigError("no examples to analyse", "data")
    out = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or Path(args.checkpoint))
    out.mkdir(parents=True, exist_ok=True)
    captures = collect_captures(exp, examples)
    rows = compute_metrics(captures)
    edges, counts = max_weight_histogram(captures, args.bins)
    write_metrics_csv(out / "metrics.csv", rows)
    write_histogram_csv(out / "histogram.csv", edges, counts)
    if not args.no_plots:
        from .plotting import plot_head_metrics, plot_histogram

        plot_histogram(edges, counts, out / "histogram.png")
        plot_head_metrics(rows, out / "entropy.png", "entropy")
    print(f"wrote {out / 'metrics.csv'} and {out / 'histogram.csv'} ({len(captures)} captures)")
    return EXIT_OK


def cmd_mask_stats(args, extra) -> int:
    if extra:
        raise ConfigError(f"unrecognised arguments {extra}")
    if args.l < 1:
        raise ConfigError("length must be positive", "l")
    if args.samples < 1:
        raise ConfigError("sample count must be positive", "samples")
    spec = DropSpec(args.variant, args.p, args.w, "normalized", "training")
    stats = mask_stats(args.l, spec, args.samples, np.random.default_rng(args.seed))
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["statistic", "value"])
    for key in ("drop_fraction", "interior_drop_fraction", "expected_interior", "mean_run_length"):
        w.writerow([key, f"{stats[key]:.6f}"])
    for j, f in enumerate(stats["per_column"]):
        w.writerow([f"column_{j}", f"{f:.6f}"])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dropattention", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "score a checkpoint"),
                                 ("analyze", cmd_analyze, "attention diagnostics for a checkpoint")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("checkpoint", help="checkpoint directory or manifest")
        p.add_argument("--data", help="data file in the task's format (default: the configured split)")
        p.add_argument("--split", default="test", choices=("train", "dev", "test"))
        if name == "analyze":
            p.add_argument("--out-dir")
            p.add_argument("--bins", type=int, default=20)
            p.add_argument("--no-plots", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("mask-stats", help="Monte-Carlo statistics of attention drop masks")
    p.add_argument("--l", type=int, default=100)
    p.add_argument("--p", type=float, default=0.3)
    p.add_argument("--w", type=int, default=1)
    p.add_argument("--variant", default="element", choices=("element", "column"))
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_mask_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args, extra)
    except (ConfigError, DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
