"""The render command: run directory in, figures + companion CSVs out."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .bundle import BundleError, load_bundle
from .figures import plot_errors, plot_gamma, plot_path, plot_snapshots

FIGURES = ("errors", "path", "gamma", "snapshots")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="plume-render",
        description="Render figures from an assimilation run directory")
    parser.add_argument("command", choices=["render"],
                        help="only 'render' is available")
    parser.add_argument("--run", required=True, help="completed run directory")
    parser.add_argument("--out", required=True, help="output directory for figures")
    parser.add_argument("--figures", default=",".join(FIGURES),
                        help="comma-separated subset of: " + ",".join(FIGURES))
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    wanted = [f.strip() for f in args.figures.split(",") if f.strip()]
    unknown = set(wanted) - set(FIGURES)
    if unknown:
        print(f"unknown figures: {sorted(unknown)}", file=sys.stderr)
        return 2

    try:
        bundle = load_bundle(args.run)
    except BundleError as exc:
        print(f"bad run directory: {exc}", file=sys.stderr)
        return 1

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    renderers = {
        "errors": plot_errors,
        "path": plot_path,
        "gamma": plot_gamma,
        "snapshots": plot_snapshots,
    }
    failures = 0
    for name in wanted:
        try:
            path = renderers[name](bundle, out_dir)
            print(f"wrote {path}")
        except BundleError as exc:
            print(f"{name}: {exc}", file=sys.stderr)
            failures += 1
    return 1 if failures else 0


if __name__ == "__main__":
    raise SystemExit(main())
