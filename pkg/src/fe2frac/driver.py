"""Simulation driver: from a validated config to a finished run.

``build_problem`` wires meshes, unit-cell workspace and boundary
conditions; ``run`` executes the load program and writes every artifact
into the configured output directory:

* ``config.json`` - the canonical config of the run;
* ``snapshot_NNNN.vtk`` / ``state_NNNN.npz`` - rendering and state at
  the configured cadence (step 0 is always eligible);
* ``rve_NNNN_<selector>.vtk`` - micro dumps of the selected cells;
* ``load_deflection.tsv`` - per accepted step: applied boundary motion,
  total reaction on the driven boundary, peak phase values, iteration
  counts;
* ``energy.tsv`` - the incremental energy ledger;
* ``summary.txt`` - final scalars of the run;
* ``state_final.npz``, or ``state_last_good.npz`` after a solver abort.

All numeric output is formatted with repr-exact floats and fixed
iteration orders, so identical configs produce identical bytes.
"""
from __future__ import annotations

import os

import numpy as np

from . import mesh as mesh_mod
from . import rve as rve_mod
from . import snapshots
from .config import RunConfig, serialize
from .energy import EnergyLedger
from .errors import ConvergenceError, Fe2FracError
from .macro import MacroProblem

_OPPOSITE = {"top": "bottom", "bottom": "top",
             "left": "right", "right": "left"}

_LOAD_COLUMNS = ("step", "load_factor", "u_x", "u_y", "reaction_x",
                 "reaction_y", "max_phase", "max_micro_phase",
                 "outer_sweeps", "sub_steps")


def build_problem(config: RunConfig) -> MacroProblem:
    """Meshes, workspace and boundary conditions of one run."""
    if config.macro_geometry == "notched_square":
        macro_mesh = mesh_mod.build_notched_square(
            config.macro_side, config.macro_elements[0])
    else:
        macro_mesh = mesh_mod.build_cooks_membrane(*config.macro_elements)

    cell_mesh = mesh_mod.build_rve(config.rve_side, config.rve_elements,
                                   config.rve_inclusion_radius)
    workspace = rve_mod.RveWorkspace(
        cell_mesh, {"matrix": config.matrix, "inclusion": config.inclusion},
        config.rve_bc, config.mode, split_mode=config.split_mode,
        tol=config.tol_micro)

    target = config.load.target_boundary
    drive = (0.0, 0.0)
    if config.macro_geometry == "cooks_membrane":
        # tapered panel: clamped spanwise at the left edge
        clamps = [("left", 0), ("left", 1)]
        if config.load.kind == "displacement_ramp":
            drive = (0.0, 1.0)
    else:
        # notched plate: opposite side fixed; a displacement ramp slides
        # the target side along its tangent, the normal stays clamped
        clamps = [(_OPPOSITE[target], 0), (_OPPOSITE[target], 1)]
        if config.load.kind == "displacement_ramp":
            tangential = 0 if target in ("top", "bottom") else 1
            clamps.append((target, 1 - tangential))
            drive = (1.0, 0.0) if tangential == 0 else (0.0, 1.0)

    return MacroProblem(
        macro_mesh, workspace, config.load, clamps=clamps,
        drive_direction=drive, traction=config.traction,
        g_c=config.macro_g_c, length_scale=config.macro_length_scale,
        tol=config.tol_staggered, max_outer=config.max_outer,
        max_bisect=config.max_bisect)


def _table(columns, rows):
    lines = ["\t".join(columns)]
    for row in rows:
        cells = []
        for value in row:
            cells.append(str(value) if isinstance(value, (int, np.integer))
                         else f"{value:.17g}")
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def _boundary_motion(problem, state):
    nodes = problem.mesh.boundary[problem.program.target_boundary]
    return state.displacements[nodes].mean(axis=0)


def _emit_fields(problem, state, config, cfg_text, out_dir, tag):
    paths = []
    snap = os.path.join(out_dir, f"snapshot_{tag}.vtk")
    snapshots.write_snapshot(problem, state, snap)
    paths.append(snap)
    stf = os.path.join(out_dir, f"state_{tag}.npz")
    snapshots.save_state(stf, state, cfg_text)
    paths.append(stf)
    for selector in config.rve_dump:
        cell = snapshots.select_cell(problem, state, selector)
        path = os.path.join(out_dir, f"rve_{tag}_{selector}.vtk")
        snapshots.write_cell_snapshot(problem, state, cell, path)
        paths.append(path)
    return paths


def run(config: RunConfig, log=None) -> int:
    """Execute the load program; returns 0 on success, 1 on abort."""
    emit = log if log is not None else (lambda line: None)
    out_dir = config.output_dir
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        emit(f"cannot create output directory {out_dir}: {exc}")
        return 2
    cfg_text = serialize(config)
    with open(os.path.join(out_dir, "config.json"), "w") as handle:
        handle.write(cfg_text)

    problem = build_problem(config)
    state = problem.initial_state()
    ledger = EnergyLedger()
    rows = []
    cadence = config.snapshot_cadence
    if cadence:
        _emit_fields(problem, state, config, cfg_text, out_dir, "0000")

    status = 0
    failure = ""
    for step in range(1, config.load.steps + 1):
        factor = config.load.factor(step)
        try:
            new_state, record = problem.staggered_step(state, factor)
        except (ConvergenceError, Fe2FracError) as exc:
            failure = f"step {step} (load factor {factor:.6g}): {exc}"
            emit(failure)
            snapshots.save_state(
                os.path.join(out_dir, "state_last_good.npz"), state,
                cfg_text)
            status = 1
            break
        ledger.record_step(problem, state, new_state)
        state = new_state
        if config.freeze_threshold is not None:
            problem.freeze_sweep(state, config.freeze_threshold)

        motion = _boundary_motion(problem, state)
        rows.append((step, factor, motion[0], motion[1],
                     record.reaction[0], record.reaction[1],
                     float(state.phase.max()),
                     float(state.cells.micro_phase.max()),
                     record.outer_sweeps, record.sub_steps))
        emit(f"step {step}/{config.load.steps} factor {factor:.6g} "
             f"sweeps {record.outer_sweeps} "
             f"reaction ({record.reaction[0]:.6g}, "
             f"{record.reaction[1]:.6g}) "
             f"s_max {state.phase.max():.4f} "
             f"d_max {state.cells.micro_phase.max():.4f}")
        if cadence and step % cadence == 0:
            _emit_fields(problem, state, config, cfg_text, out_dir,
                         f"{step:04d}")

    with open(os.path.join(out_dir, "load_deflection.tsv"), "w") as handle:
        handle.write(_table(_LOAD_COLUMNS, rows))
    with open(os.path.join(out_dir, "energy.tsv"), "w") as handle:
        handle.write(ledger.to_table())
    snapshots.save_state(os.path.join(out_dir, "state_final.npz"), state,
                         cfg_text)
    with open(os.path.join(out_dir, "summary.txt"), "w") as handle:
        handle.write(_summary(config, state, ledger, rows, status, failure))
    return status


def _summary(config, state, ledger, rows, status, failure):
    report = ledger.balance_report()
    lines = [
        f"mode: {config.mode}",
        f"geometry: {config.macro_geometry}",
        f"steps accepted: {len(rows)} of {config.load.steps}",
        f"final load factor: {state.load_factor:.17g}",
        f"max macro phase: {state.phase.max():.17g}",
        f"max micro phase: {state.cells.micro_phase.max():.17g}",
        f"frozen cells: {int(state.cells.frozen.sum())}",
        f"external work: {report['ext_work']:.17g}",
        f"stored energy change: {report['int_energy']:.17g}",
        f"micro dissipation: {report['D_mi']:.17g}",
        f"macro dissipation: {report['D_ma']:.17g}",
        f"energy defect: {report['defect']:.17g}",
        f"relative defect: {report['relative_defect']:.17g}",
        f"status: {'ok' if status == 0 else 'aborted'}",
    ]
    if failure:
        lines.append(f"failure: {failure}")
    return "\n".join(lines) + "\n"


# -- config self checks ---------------------------------------------------

def _check_lines(config):
    """Invariant checks on the configured discretization, as (name, ok)."""
    from .config import parse_config

    rng = np.random.default_rng(config.seed)
    yield ("config round-trip",
           parse_config(serialize(config)) == config)

    problem = build_problem(config)
    ws = problem.cell_ws
    yield ("geometry and materials build", True)

    F = np.eye(2) + 0.05 * rng.standard_normal((1, 2, 2))
    s = np.zeros(1)
    batch = ws.new_batch(1)
    rve_mod.solve_micro_batch(ws, F, s, batch)

    Ft = ws.micro_gradients(F, batch.fluctuations)
    avg_defect = float(np.abs(ws.volume_average(Ft) - F).max())
    yield ("deformation average", avg_defect <= 1e-10)

    out = ws.response(Ft, _total_phase(ws, problem, batch, s), order=1)
    P_gp = out["P"]
    P_bar = ws.volume_average(P_gp)
    fluct_power = ws.volume_average(
        np.einsum('beqij,beqij->beq', P_gp, Ft - F[:, None, None]))
    scale = max(float(np.abs(P_bar).max()), 1e-30)
    tol = 1e-12 if ws.bc == "voigt" else 1e-6
    yield ("stress power of fluctuations", abs(float(fluct_power[0]))
           <= tol * scale)

    hom = rve_mod.homogenize_batch(ws, F, s, batch)
    tan = rve_mod.condensed_tangent_batch(ws, F, s, batch)
    dF = 1e-6
    fd_ok = True
    for i in range(2):
        for j in range(2):
            Fp = F.copy()
            Fp[0, i, j] += dF
            Fm = F.copy()
            Fm[0, i, j] -= dF
            bp, bm = batch.copy(), batch.copy()
            rve_mod.solve_micro_batch(ws, Fp, s, bp)
            rve_mod.solve_micro_batch(ws, Fm, s, bm)
            Pp = rve_mod.homogenize_batch(ws, Fp, s, bp)["P"]
            Pm = rve_mod.homogenize_batch(ws, Fm, s, bm)["P"]
            fd = (Pp[0] - Pm[0]) / (2.0 * dF)
            err = np.abs(tan["dP_dF"][0, :, :, i, j] - fd).max()
            fd_ok = fd_ok and err <= 1e-4 * max(scale, 1.0)
    yield ("condensed moduli vs finite differences", fd_ok)

    mats = {"matrix": config.matrix, "inclusion": config.inclusion}
    pieces = []
    for mat in mats.values():
        Fr = np.eye(2) + 0.1 * rng.standard_normal((8, 2, 2))
        sr = rng.uniform(0.0, 0.7, 8)
        from . import constitutive
        full = constitutive.response_fields(
            Fr, sr, mat.alpha, mat.beta, mat.lambda_vol,
            split_mode=config.split_mode, order=1)
        h = 1e-6
        ok = True
        for i in range(2):
            for j in range(2):
                Fp, Fm = Fr.copy(), Fr.copy()
                Fp[:, i, j] += h
                Fm[:, i, j] -= h
                pp = constitutive.response_fields(
                    Fp, sr, mat.alpha, mat.beta, mat.lambda_vol,
                    split_mode=config.split_mode, order=0)["psi"]
                pm = constitutive.response_fields(
                    Fm, sr, mat.alpha, mat.beta, mat.lambda_vol,
                    split_mode=config.split_mode, order=0)["psi"]
                fd = (pp - pm) / (2.0 * h)
                ok = ok and np.abs(full["P"][:, i, j] - fd).max() \
                    <= 1e-4 * max(float(np.abs(full["P"]).max()), 1.0)
        pieces.append(ok)
    yield ("pointwise stress vs finite differences", all(pieces))


def _total_phase(ws, problem, batch, s):
    if ws.mode == "micro_fracture":
        return ws.phase_at_gauss(batch.micro_phase)[0]
    n_q = ws.edata.grads.shape[1]
    return np.broadcast_to(s[:, None, None],
                           (len(s), ws.mesh.n_elems, n_q))


def check(config: RunConfig, log=None) -> int:
    """Run the invariant suite on a config; 0 if every check passes."""
    emit = log if log is not None else (lambda line: None)
    status = 0
    for name, ok in _check_lines(config):
        emit(f"check {name}: {'pass' if ok else 'FAIL'}")
        if not ok:
            status = 1
    return status
