"""Command-line entry point: ``sfac {run,sweep-agents,sweep-heterogeneity,baseline,plot}``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import bench
from .config import ConfigError, load_spec
from .io import CsvFormatError


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sfac", description="federated actor-critic experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", type=Path, required=config_required,
                       help="YAML or JSON experiment spec")
        p.add_argument("--seed", type=_u64, default=0, help="master seed")
        p.add_argument("--out", type=Path, default=None, help="output directory")

    common(sub.add_parser("run", help="run the configured algorithm over n_seeds seeds"))
    p = sub.add_parser("sweep-agents", help="sweep the number of agents")
    common(p)
    p.add_argument("--agents", type=int, nargs="+", default=None, help="override sweep.agents")
    p = sub.add_parser("sweep-heterogeneity", help="sweep the heterogeneity level h")
    common(p)
    p.add_argument("--levels", type=float, nargs="+", default=None,
                   help="override sweep.heterogeneity")
    common(sub.add_parser("baseline", help="run the local-critic A3C-style comparator"))
    p = sub.add_parser("plot", help="render CSVs to an SVG file")
    common(p, config_required=False)
    p.add_argument("--kind", choices=("curves", "sweep"), default="curves")
    p.add_argument("csv", nargs="+", type=Path)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            out = args.out if args.out is not None else Path(".")
            name = "curves.svg" if args.kind == "curves" else "sweep.svg"
            path = _plot(args.csv, args.kind, out / name)
            print(path)
            return 0
        spec = load_spec(args.config)
        if args.command == "run":
            return bench.cmd_run(spec, args.seed, args.out)
        if args.command == "baseline":
            return bench.cmd_baseline(spec, args.seed, args.out)
        if args.command == "sweep-agents":
            return bench.cmd_sweep_agents(spec, args.seed, args.out, args.agents)
        return bench.cmd_sweep_heterogeneity(spec, args.seed, args.out, args.levels)
    except ConfigError as err:
        print(f"invalid config {args.config}:\n{err}", file=sys.stderr)
        return 2
    except (CsvFormatError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


def _plot(paths, kind, out):
    from .plotting import cmd_plot
    return cmd_plot(paths, kind, out)


if __name__ == "__main__":
    sys.exit(main())
