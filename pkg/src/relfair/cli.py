"""Command-line entry point: ``relfair {run,compare,exact,metrics,validate-config}``."""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, ExperimentConfig, load_config
from .losses import ContractViolation, CsvParseError


def _load(path: str, args) -> ExperimentConfig:
    cfg = load_config(path)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed, partition={"seed": args.seed})
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relfair", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True, multi=False):
        if multi:
            p.add_argument("--config", action="append", default=[], metavar="PATH", help="repeat for each run")
        else:
            p.add_argument("--config", required=config_required, metavar="PATH")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, metavar="DIR", help="output directory")
        p.add_argument("--workers", type=int, default=1, help="client/grid threads; never changes results")

    common(sub.add_parser("run", help="train one algorithm and write its artifacts"))
    cmp = sub.add_parser("compare", help="run several configs on a shared partition")
    common(cmp, multi=True)
    cmp.add_argument("--seeds", type=int, default=None, metavar="K", help="repeat over seeds 0..K-1")
    common(sub.add_parser("exact", help="grid phi-sweep of exact minimax solutions"))
    met = sub.add_parser("metrics", help="fairness report for a CSV of losses")
    met.add_argument("losses", metavar="LOSSES_CSV")
    met.add_argument("--alpha-A", dest="alpha_A", type=float, default=0.2)
    met.add_argument("--alpha-B", dest="alpha_B", type=float, default=0.2)
    met.add_argument("--phi", type=float, default=0.0)
    met.add_argument("--out", default="out", metavar="DIR")
    val = sub.add_parser("validate-config", help="check a config file and print the resolved form")
    val.add_argument("--config", required=True, metavar="PATH")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from . import harness

    try:
        if args.command == "validate-config":
            cfg = load_config(args.config)
            print(json.dumps(cfg.snapshot(), indent=2, sort_keys=True))
            return 0
        if args.command == "metrics":
            report = harness.cmd_metrics(args.losses, args.alpha_A, args.alpha_B, args.phi, args.out)
            print(json.dumps(report["report"], indent=2, sort_keys=True))
            return 0
        if args.command == "compare":
            if not args.config:
                print("relfair compare: error: at least one --config is required", file=sys.stderr)
                return 2
            cfgs = [_load(p, args) for p in args.config]
            seeds = list(range(args.seeds)) if args.seeds else None
            out = args.out or cfgs[0]["output_dir"]
            report = harness.cmd_compare(cfgs, out, seeds, args.workers)
            print(json.dumps(report["summary"], indent=2, sort_keys=True))
            return 0
        cfg = _load(args.config, args)
        if args.command == "run":
            art = harness.cmd_run(cfg, args.out, args.workers)
            print(json.dumps({"report": art.metrics["report"], "accuracy": art.metrics["accuracy"]}, indent=2, sort_keys=True))
        else:
            m = harness.cmd_exact(cfg, args.out, args.workers)
            print(json.dumps(m["summary"], indent=2, sort_keys=True))
        return 0
    except (ConfigError, ContractViolation, CsvParseError) as exc:
        print(f"relfair {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
