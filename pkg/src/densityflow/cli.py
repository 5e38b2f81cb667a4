"""``densityflow`` command-line entry point."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .core import DensityFlowError, NonFiniteState, NumericalUnderflow
from .eot import NoConvergence, StalePotentials
from .flow import OutOfRange
from .io import read_dataset

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3
NUMERICAL = (NoConvergence, StalePotentials, NonFiniteState, NumericalUnderflow, FloatingPointError)

log = logging.getLogger("densityflow")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("DENSITYFLOW_LOG", "error").strip().lower()
    level = LOG_LEVELS.get(name, logging.ERROR)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if name not in LOG_LEVELS:
        log.error("DENSITYFLOW_LOG=%r not recognised; using 'error'", name)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="densityflow", description="Density-flow estimation from noisy snapshots.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=False):
        sp.add_argument("--config", required=True, type=Path, help="INI experiment config")
        if dataset:
            sp.add_argument("--dataset", required=True, type=Path, help="snapshot dataset CSV")
        sp.add_argument("--out", type=Path, default=None, help="output directory (default: outputs.directory)")
        sp.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed (default: experiment.seed)")
        sp.add_argument("--threads", type=int, default=1, help="worker cap; results do not depend on it")
        return sp

    common(sub.add_parser("simulate", help="simulate a snapshot dataset"))
    fit = common(sub.add_parser("fit", help="fit the estimator with inexact CKLGD"), dataset=True)
    fit.add_argument("--resume", action="store_true", help="continue from checkpoints in --out")
    common(sub.add_parser("compare", help="CKLGD versus the mean-field Langevin baseline"), dataset=True)
    rec = common(sub.add_parser("reconstruct", help="sample the reconstructed flow at given times"))
    rec.add_argument("--fit", required=True, type=Path, help="output directory of a previous fit")
    rec.add_argument("--times", required=True, help="comma-separated times within the anchor range")
    rec.add_argument("--paths", type=int, default=None, help="number of bridge paths (default 10 B)")
    common(sub.add_parser("rate-sweep", help="OU-oracle error sweep over (m, N)"))
    return p


def _out_dir(args, cfg) -> Path:
    if args.out is not None:
        return args.out
    if cfg.has("outputs"):
        return Path(cfg.get("outputs", "directory"))
    return Path("out")


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    _setup_logging()
    from . import experiments as ex

    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else (cfg.get("experiment", "seed")
                                                         if cfg.has("experiment") else 0)
        if not 0 <= seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        out = _out_dir(args, cfg)
        if args.command == "simulate":
            path = ex.cmd_simulate(cfg, seed, out)
            print(path)
        elif args.command == "fit":
            res = ex.cmd_fit(cfg, read_dataset(args.dataset), seed, out, args.threads, args.resume)
            print(f"final objective {res.result.losses[-1].total:.10g}; outputs in {out}")
        elif args.command == "compare":
            print(ex.cmd_compare(cfg, read_dataset(args.dataset), seed, out, args.threads))
        elif args.command == "reconstruct":
            times = [float(t) for t in args.times.replace(",", " ").split()]
            for p in ex.cmd_reconstruct(cfg, args.fit, times, seed, out, args.paths):
                print(p)
        elif args.command == "rate-sweep":
            res = ex.cmd_rate_sweep(cfg, seed, out)
            for axis, fixed, slope in res.slopes:
                print(f"slope over {axis} at m={fixed}: " + ("undefined" if slope is None else f"{slope:.4f}"))
    except (ConfigError, OutOfRange) as e:
        print(f"densityflow: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERICAL as e:
        print(f"densityflow: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FileNotFoundError, DensityFlowError, ValueError) as e:
        print(f"densityflow: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
