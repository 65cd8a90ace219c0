"""Command line entry point: ``volatile-fl run|summarize|compare``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness


def _seeds(text: str) -> list:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volatile-fl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a TOML config")
    run.add_argument("config")
    run.add_argument("--seed-override", type=_seeds, help="comma-separated seeds replacing the config's list")
    run.add_argument("--mode", choices=harness.MODES)
    run.add_argument("--out", help="output directory (default: the config's 'out')")

    summ = sub.add_parser("summarize", help="rebuild summary.json from a results directory")
    summ.add_argument("directory")

    comp = sub.add_parser("compare", help="paired per-seed comparison of the policies in a results directory")
    comp.add_argument("directory")
    comp.add_argument("--policies", help="comma-separated subset of policies")
    return parser


def _print_table(summary: dict) -> None:
    training = summary["mode"] == "training"
    header = f"{'policy':<12} {'seeds':>5} {'success':>8} {'CEP':>10} {'regret':>10}"
    if training:
        header += f" {'final acc':>9}"
    print(header)
    for name, p in summary["policies"].items():
        line = f"{name:<12} {len(p['seeds']):>5} {p['mean_success_ratio']:>8.4f} {p['mean_cep']:>10.1f} {p['mean_regret']:>10.1f}"
        if training:
            line += f" {p['mean_final_accuracy']:>9.4f}"
        print(line)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            cfg = harness.ExperimentConfig.load(args.config)
            if args.seed_override:
                cfg.seeds = args.seed_override
            if args.mode:
                cfg.mode = args.mode
            if args.out:
                cfg.out = args.out
            cfg.validate()
            _print_table(harness.run_experiment(cfg))
        elif args.command == "summarize":
            _print_table(harness.summarize_dir(args.directory))
        elif args.command == "compare":
            runs = harness.load_runs(args.directory)
            policies = args.policies.split(",") if args.policies else None
            report = harness.compare_policies(runs, policies)
            json.dump(report, sys.stdout, indent=2)
            print()
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
