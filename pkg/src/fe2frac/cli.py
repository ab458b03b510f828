"""Command line front end.

Subcommands::

    fe2frac run --preset shear_macro_desk [--output DIR] [--max-threads N]
    fe2frac run --config run.json [--output DIR] [--max-threads N]
    fe2frac check (--config PATH | --preset NAME) [--max-threads N]
    fe2frac inspect-rve --snapshot state.npz [--selector NAME] [--output F]

``run`` executes a configuration, ``check`` runs the invariant suite on
one, and ``inspect-rve`` renders a single unit cell out of a saved
state file (``state_*.npz`` from a run directory).
"""
from __future__ import annotations

import argparse
import contextlib
import sys

import numpy as np

from . import driver, snapshots
from .config import PRESETS, parse_config, preset, replace
from .errors import Fe2FracError


def _add_config_source(parser):
    parser.add_argument("--config", metavar="PATH",
                        help="path to a JSON run configuration")
    parser.add_argument("--preset", choices=PRESETS,
                        help="name of a built-in configuration")


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="fe2frac",
        description="two-scale finite element solver for phase-field "
                    "brittle fracture")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a load program")
    _add_config_source(p_run)
    p_run.add_argument("--output", metavar="DIR",
                       help="override the configured output directory")
    p_run.add_argument("--max-threads", type=int, metavar="N",
                       help="cap the BLAS/LAPACK thread pools")

    p_check = sub.add_parser("check",
                             help="run the invariant suite on a config")
    _add_config_source(p_check)
    p_check.add_argument("--max-threads", type=int, metavar="N",
                         help="cap the BLAS/LAPACK thread pools")

    p_insp = sub.add_parser("inspect-rve",
                            help="render one unit cell from a state file")
    p_insp.add_argument("--snapshot", required=True, metavar="PATH",
                        help="state file written by a run (state_*.npz)")
    p_insp.add_argument("--selector", default="max-deformation",
                        choices=("max-deformation", "max-phase"),
                        help="which cell to render")
    p_insp.add_argument("--output", metavar="PATH",
                        help="output file (default: next to the input)")
    return parser


def _load_config(args):
    if (args.config is None) == (args.preset is None):
        raise Fe2FracError(
            "exactly one of --config or --preset is required")
    if args.preset is not None:
        config = preset(args.preset)
    else:
        try:
            with open(args.config) as handle:
                text = handle.read()
        except OSError as exc:
            raise Fe2FracError(f"cannot read {args.config}: {exc}") \
                from None
        config = parse_config(text)
    if getattr(args, "output", None):
        config = replace(config, output_dir=args.output)
    return config


def _thread_cap(limit):
    if limit is None:
        return contextlib.nullcontext()
    if limit < 1:
        raise Fe2FracError("--max-threads must be at least 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=limit)


def _inspect(args, log):
    config_text, state = snapshots.load_state(args.snapshot)
    config = parse_config(config_text)
    problem = driver.build_problem(config)
    if len(state.cells) != problem.n_gp:
        raise Fe2FracError(
            f"{args.snapshot}: cell count {len(state.cells)} does not "
            f"match the embedded config ({problem.n_gp})")
    cell = snapshots.select_cell(problem, state, args.selector)
    out = args.output or f"{args.snapshot.rsplit('.', 1)[0]}" \
                         f"_rve_{args.selector}.vtk"
    snapshots.write_cell_snapshot(problem, state, cell, out)
    F = problem.deformation_at_gauss(state.displacements)[cell]
    deviation = float(np.linalg.norm(F - np.eye(2)))
    n_q = len(problem.edata.quad.weights)
    log(f"cell {cell} (element {cell // n_q}, point {cell % n_q})")
    log(f"deformation gradient deviation: {deviation:.6g}")
    log(f"max micro phase: {state.cells.micro_phase[cell].max():.6g}")
    log(f"frozen: {bool(state.cells.frozen[cell])}")
    log(f"wrote {out}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    log = print
    try:
        if args.command == "run":
            config = _load_config(args)
            with _thread_cap(args.max_threads):
                return driver.run(config, log=log)
        if args.command == "check":
            config = _load_config(args)
            with _thread_cap(args.max_threads):
                return driver.check(config, log=log)
        return _inspect(args, log)
    except Fe2FracError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
