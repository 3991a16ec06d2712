"""Command-line entry point: ``dualfed {run,sweep,dataset,check}``.

Exit codes: 0 success, 1 failed self-check, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .config import ExperimentConfig, load_config
from .errors import ConfigError, InputError, NumericalError

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="experiment config file (defaults apply when omitted)")
    p.add_argument("--seed-override", type=_seeds, metavar="SEEDS", help="replace the configured seed list")
    p.add_argument("--output", metavar="DIR", help="output directory (overrides experiment.output)")
    p.add_argument("--quiet", action="store_true", help="suppress progress output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualfed", description="Federated dual-adapter simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train the configured scenario(s) for every seed")
    _common(p)
    p.add_argument("--scenario", help="override experiment.scenario (a scenario name or 'grid')")

    p = sub.add_parser("sweep", help="adapted-block ablation and communication frontier")
    _common(p)
    p.add_argument("--blocks", type=_seeds, metavar="K", help="block counts, e.g. 2,4,12")
    p.add_argument("--scenario", action="append", help="sweep scenario (repeatable)")

    p = sub.add_parser("dataset", help="generate the synthetic federation; summarize or dump it")
    _common(p)
    p.add_argument("--seed", type=int, help="data seed (overrides data.seed)")
    p.add_argument("--shift-scale", type=float, help="global shift magnitude (overrides data.shift_scale)")
    p.add_argument("--summary", action="store_true", help="print per-client class counts")
    p.add_argument("--dump", metavar="PATH", help="write the dataset as a binary file")

    p = sub.add_parser("check", help="gradient, aggregation and byte-accounting self-tests")
    p.add_argument("--tolerance", type=float, default=1e-4, help="gradient-check relative tolerance")
    p.add_argument("--trials", type=int, default=20, help="random trials per oracle")
    p.add_argument("--quiet", action="store_true")
    return parser


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed_override", None):
        cfg = cfg.with_seeds(args.seed_override)
    if getattr(args, "output", None):
        cfg = cfg.with_output(args.output)
    return cfg


def cmd_run(args) -> int:
    from .experiment import run_experiment

    cfg = _resolve(args)
    if args.scenario:
        cfg = replace(cfg, scenario=args.scenario)
    run_experiment(cfg, quiet=args.quiet)
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .experiment import run_sweep

    cfg = _resolve(args)
    sweep = cfg.sweep
    if args.blocks:
        sweep = replace(sweep, blocks=args.blocks)
    if args.scenario:
        sweep = replace(sweep, scenarios=tuple(args.scenario))
    cfg = replace(cfg, sweep=sweep)
    _, points = run_sweep(cfg, quiet=args.quiet)
    if not args.quiet:
        for p in points:
            star = "*" if p.on_frontier else " "
            print(f"{star} {p.label:<20} {p.bytes_per_round:>10} B  {p.balanced_accuracy:.3f}")
    return EXIT_OK


def cmd_dataset(args) -> int:
    from .data import dump_dataset, summary_table
    from .experiment import build_dataset, resolve_output

    cfg = _resolve(args)
    data = cfg.data
    if args.seed is not None:
        data = replace(data, seed=args.seed)
    if args.shift_scale is not None:
        data = replace(data, shift_scale=args.shift_scale)
    cfg = replace(cfg, data=data)
    fed = build_dataset(cfg)
    if args.summary or not args.dump:
        print(summary_table(fed))
    if args.dump:
        path = resolve_output(args.dump)
        path.parent.mkdir(parents=True, exist_ok=True)
        dump_dataset(fed, path)
        if not args.quiet:
            print(f"wrote {path}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .selfcheck import run_checks

    results = run_checks(tolerance=args.tolerance, trials=args.trials)
    failed = [r for r in results if not r.passed]
    if not args.quiet:
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<32} {r.detail}")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "dataset": cmd_dataset, "check": cmd_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, InputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
