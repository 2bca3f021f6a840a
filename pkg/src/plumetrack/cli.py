"""Command-line entry point.

Subcommands: truth (reference run only), baseline (plus the biased model),
assimilate (one filtered run), sweep (everything).  All artifacts are
delimited files under the output directory; rendering them to figures is a
separate tool.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .harness import run_experiment


def _parse_float_list(text: str):
    return tuple(float(x) for x in text.split(",") if x.strip())


def _add_common(p):
    p.add_argument("--config", required=True, help="experiment TOML file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--snapshot-times", type=_parse_float_list,
                   help="comma-separated times for field snapshots")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="plumetrack",
        description="Twin-experiment contaminant assimilation runs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("truth", help="reference run only")
    _add_common(p)

    p = sub.add_parser("baseline", help="reference run plus the biased model")
    _add_common(p)

    p = sub.add_parser("assimilate", help="one filtered run")
    _add_common(p)
    p.add_argument("--theta", type=_parse_float_list, default=(0.2,),
                   help="exploration weight (single value)")

    p = sub.add_parser("sweep", help="truth, baseline, and every theta")
    _add_common(p)
    p.add_argument("--theta", type=_parse_float_list,
                   help="comma-separated exploration weights")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.snapshot_times is not None:
        cfg.run.snapshot_times = args.snapshot_times

    if args.command == "truth":
        thetas, include_baseline = [], False
    elif args.command == "baseline":
        thetas, include_baseline = [], True
    elif args.command == "assimilate":
        thetas, include_baseline = list(args.theta), True
    else:  # sweep
        thetas = list(args.theta) if args.theta is not None else None
        include_baseline = True

    art = run_experiment(cfg, thetas=thetas, out_dir=args.out,
                         include_baseline=include_baseline)
    print(f"artifacts in {art.out_dir} (config {art.config_hash}, seed {art.seed})")
    if art.errors:
        print(f"{len(art.errors)} run(s) failed; see manifest.json", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
