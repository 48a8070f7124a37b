"""Command line entry point: ``gradma run|report|selftest``."""

from __future__ import annotations

import argparse
import logging
import sys

from .flcore import ConfigError
from .harness import DATA_ROOT_ENV, parse_config, report, run_experiment


def _cmd_run(args) -> int:
    overrides = {
        "seed": args.seed,
        "strategy": args.strategy,
        "out": args.out,
        "eval_every": args.eval_every,
    }
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "--set expects key=value")
        overrides[key.strip()] = value.strip()
    spec = parse_config(args.config, overrides)
    summary = run_experiment(spec)
    for row in summary:
        mean, std = row["top_accuracy_mean"], row["top_accuracy_std"]
        acc = "failed" if mean is None else f"{100 * mean:.2f} +/- {100 * std:.2f}"
        failed = f"  (failed seeds: {row['failed_seeds']})" if row["failed_seeds"] else ""
        print(f"{row['strategy']:<10} top test accuracy {acc}{failed}")
    return 0 if all(not r["failed_seeds"] for r in summary) else 1


def _cmd_report(args) -> int:
    table = report(args.dir, args.target)
    if not table:
        print(f"no metrics CSVs in {args.dir}", file=sys.stderr)
        return 1
    header = ["strategy", "seed", "top_acc"] + [f">={t:g}" for t in args.target]
    print("\t".join(header))
    for e in table:
        top = "--" if e["top_accuracy"] is None else f"{100 * e['top_accuracy']:.2f}"
        cells = [e["strategy"], str(e["seed"]), top]
        cells += ["--" if e[t] is None else str(e[t]) for t in args.target]
        print("\t".join(cells))
    return 0


def _cmd_selftest(args) -> int:
    from .selftest import run_all
    return 0 if run_all() else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradma", description="Federated learning simulations with GradMA and baselines.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment described by a config file",
                       epilog=f"MNIST IDX files are read from ${DATA_ROOT_ENV} (default ./data/mnist).")
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--seed", type=int, help="run this single seed instead of the configured ones")
    p.add_argument("--strategy", help="strategy tag, or a comma-separated list for a grid")
    p.add_argument("--out", help="output directory")
    p.add_argument("--eval-every", type=int, dest="eval_every", help="evaluate every k rounds")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("report", help="rounds-to-accuracy table for a finished experiment")
    p.add_argument("dir")
    p.add_argument("--target", type=float, nargs="+", default=[0.9], help="accuracy targets in [0, 1]")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("selftest", help="run the fast invariant checks")
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
