"""Command-line entry point: ``vleto run | gen-data | compare``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig
from .data import generate_synthetic, write_csv
from .errors import ComparisonError, ConfigError, IngestionError, NumericalError
from .experiment import compare_runs, run_experiment


def _run(args) -> int:
    config = ExperimentConfig.load(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    if overrides:
        config = config.with_overrides(**overrides)
    result = run_experiment(config, export_prototypes=args.export_prototypes, dump_fisher=args.dump_fisher,
                            dump_trace=args.dump_trace)
    for m in result.metrics:
        seen = " ".join(f"T{j}={a:.4f}" for j, a in sorted(m.accuracies.items()))
        print(f"task {m.task_id}: {seen} all={m.aggregate:.4f} loss={m.train_loss:.4f}")
    print(f"wrote {result.output_dir / 'metrics.csv'}")
    return 0


def _gen_data(args) -> int:
    ds = generate_synthetic(args.n_samples, args.n_features, args.n_classes, args.separation, seed=args.seed)
    write_csv(ds, args.out)
    print(f"wrote {args.out} ({ds.n_samples} rows, {ds.n_features} features, {ds.n_classes} classes)")
    return 0


def _compare(args) -> int:
    cmp = compare_runs(args.metrics, names=args.names.split(",") if args.names else None)
    print(cmp.to_text())
    if args.out:
        Path(args.out).write_text(cmp.to_csv(), encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vleto", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a JSON config")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory (overrides output_dir in the config)")
    run.add_argument("--export-prototypes", action="store_true")
    run.add_argument("--dump-fisher", action="store_true")
    run.add_argument("--dump-trace", action="store_true")
    run.set_defaults(func=_run)

    gen = sub.add_parser("gen-data", help="write a synthetic Gaussian-blob CSV")
    gen.add_argument("--out", required=True)
    gen.add_argument("--n-samples", type=int, default=2000)
    gen.add_argument("--n-features", type=int, default=16)
    gen.add_argument("--n-classes", type=int, default=8)
    gen.add_argument("--separation", type=float, default=4.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=_gen_data)

    cmp = sub.add_parser("compare", help="compare metrics.csv files against the first one")
    cmp.add_argument("metrics", nargs="+")
    cmp.add_argument("--names", help="comma-separated labels for the runs")
    cmp.add_argument("--out", help="also write the comparison as CSV")
    cmp.set_defaults(func=_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (IngestionError, ComparisonError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
