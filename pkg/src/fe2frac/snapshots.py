"""Field snapshots and state files of a two-scale run.

Two kinds of artifact:

* rendering snapshots, legacy ASCII unstructured-grid files (``.vtk``)
  of the macro fields or of one cell's micro fields, readable by any
  common viewer;
* state files (``.npz``), complete solver states for later inspection,
  written with fixed zip metadata so identical states give identical
  bytes.

Snapshot layout (point fields in order ``displacement``, ``s``,
``reference_position``; cell fields ``von_mises``, ``peak_micro_phase``,
``drive_H``): the POINTS block holds the deformed coordinates, so the
reference configuration travels in the trailing point field.
"""
from __future__ import annotations

import io
import zipfile

import numpy as np

from . import constitutive, rve
from .errors import ConfigError

_VTK_HEADER = "# vtk DataFile Version 3.0"
_QUAD = 9


def _fmt(values):
    return " ".join(f"{v:.17g}" for v in values)


def _points_block(lines, coords):
    lines.append(f"POINTS {len(coords)} double")
    for xy in coords:
        lines.append(_fmt((xy[0], xy[1], 0.0)))


def _cells_block(lines, elements):
    n_e = len(elements)
    lines.append(f"CELLS {n_e} {5 * n_e}")
    for conn in elements:
        lines.append("4 " + " ".join(str(int(i)) for i in conn))
    lines.append(f"CELL_TYPES {n_e}")
    lines.extend([str(_QUAD)] * n_e)


def _vector_field(lines, name, values):
    lines.append(f"VECTORS {name} double")
    for row in values:
        lines.append(_fmt((row[0], row[1], 0.0)))


def _scalar_field(lines, name, values):
    lines.append(f"SCALARS {name} double 1")
    lines.append("LOOKUP_TABLE default")
    for v in values:
        lines.append(f"{v:.17g}")


def _write_text(path, lines):
    try:
        with open(path, "w", encoding="ascii", newline="\n") as handle:
            handle.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write snapshot {path}: {exc}") from None


def von_mises_stress(P, F, s33):
    """Von Mises stress from in-plane PK1 and the out-of-plane normal.

    The in-plane Cauchy stress is sigma = P F^T / det(F), symmetrized
    against round-off; ``s33`` supplies the third normal component.
    """
    j = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    sigma = np.einsum('qik,qjk->qij', P, F) / j[:, None, None]
    s11 = sigma[:, 0, 0]
    s22 = sigma[:, 1, 1]
    s12 = 0.5 * (sigma[:, 0, 1] + sigma[:, 1, 0])
    return np.sqrt(0.5 * ((s11 - s22) ** 2 + (s22 - s33) ** 2
                          + (s33 - s11) ** 2) + 3.0 * s12 ** 2)


def _out_of_plane_stress(problem, F, P_hom):
    """3D-consistent sigma_33 at the macro quadrature points.

    The plane-strain energy is the 3D law restricted to F_33 = 1, whose
    out-of-plane stress at that restriction is
    ``sigma_33 = (2 beta (F:F - 2) + lambda j (j - 1)) / j``.  Cell
    constants are volume-averaged over the unit cell, and the value is
    scaled by the ratio of the homogenized in-plane stress to the
    undamaged pointwise one, so damage shows in the plotted stress the
    same way it does in the in-plane response.
    """
    ws = problem.cell_ws
    wgt = ws.edata.detJw.sum(axis=1)
    beta = float(wgt @ ws.beta) / ws.volume
    lam = float(wgt @ ws.lambda_vol) / ws.volume
    alpha = float(wgt @ ws.alpha) / ws.volume

    t = np.einsum('qij,qij->q', F, F)
    j = F[:, 0, 0] * F[:, 1, 1] - F[:, 0, 1] * F[:, 1, 0]
    s33 = (2.0 * beta * (t - 2.0) + lam * j * (j - 1.0)) / j

    bare = constitutive.response_fields(
        F, np.zeros(len(F)), alpha, beta, lam,
        split_mode=ws.split_mode, order=1)["P"]
    norm_bare = np.sqrt(np.einsum('qij,qij->q', bare, bare))
    norm_hom = np.sqrt(np.einsum('qij,qij->q', P_hom, P_hom))
    floor = 1e-30 * max(1.0, float(norm_bare.max(initial=0.0)))
    g_eff = np.clip(norm_hom / np.maximum(norm_bare, floor), 0.0, 1.0)
    g_eff[norm_bare <= floor] = 1.0
    return g_eff * s33


def write_snapshot(problem, state, path):
    """Render one accepted macro state to a legacy ASCII grid file."""
    mesh = problem.mesh
    F = problem.deformation_at_gauss(state.displacements)
    s_gp = problem.phase_at_gauss(state.phase)
    hom = rve.homogenize_batch(problem.cell_ws, F, s_gp, state.cells)

    s33 = _out_of_plane_stress(problem, F, hom["P"])
    vm = von_mises_stress(hom["P"], F, s33)
    n_q = len(problem.edata.quad.weights)
    vm_cell = vm.reshape(mesh.n_elems, n_q).mean(axis=1)
    drive_cell = np.asarray(hom["H"]).reshape(mesh.n_elems, n_q).mean(axis=1)
    peak_cell = state.cells.micro_phase.max(axis=1) \
        .reshape(mesh.n_elems, n_q).max(axis=1)

    lines = [_VTK_HEADER, "two-scale fracture macro state", "ASCII",
             "DATASET UNSTRUCTURED_GRID"]
    _points_block(lines, mesh.nodes + state.displacements)
    _cells_block(lines, mesh.elements)
    lines.append(f"POINT_DATA {mesh.n_nodes}")
    _vector_field(lines, "displacement", state.displacements)
    _scalar_field(lines, "s", state.phase)
    _vector_field(lines, "reference_position", mesh.nodes)
    lines.append(f"CELL_DATA {mesh.n_elems}")
    _scalar_field(lines, "von_mises", vm_cell)
    _scalar_field(lines, "peak_micro_phase", peak_cell)
    _scalar_field(lines, "drive_H", drive_cell)
    _write_text(path, lines)
    return path


def select_cell(problem, state, selector: str) -> int:
    """Index of the cell singled out by a dump selector.

    ``max-deformation`` picks the quadrature point maximizing
    ``||F - I||_F``, ``max-phase`` the one with the largest active
    phase (micro peak in micro mode, macro s at the point otherwise).
    """
    if selector == "max-deformation":
        F = problem.deformation_at_gauss(state.displacements)
        dev = F - np.eye(2)
        return int(np.einsum('qij,qij->q', dev, dev).argmax())
    if selector == "max-phase":
        if problem.mode == "micro_fracture":
            return int(state.cells.micro_phase.max(axis=1).argmax())
        return int(problem.phase_at_gauss(state.phase).argmax())
    raise ConfigError(f"selector: expected one of max-deformation, "
                      f"max-phase, got {selector!r}")


def write_cell_snapshot(problem, state, cell_index, path):
    """Render one cell's micro fields (local frame of the unit cell)."""
    ws = problem.cell_ws
    if not 0 <= cell_index < len(state.cells):
        raise ConfigError(f"cell index {cell_index} outside 0.."
                          f"{len(state.cells) - 1}")
    F = problem.deformation_at_gauss(state.displacements)[
        cell_index:cell_index + 1]
    s_gp = problem.phase_at_gauss(state.phase)[cell_index:cell_index + 1]
    cell = state.cells.state(cell_index)

    w = cell.fluctuations[None]
    d = cell.micro_phase[None]
    Ft = ws.micro_gradients(F, w)
    s_total = ws.phase_at_gauss(d)[0] if problem.mode == "micro_fracture" \
        else np.broadcast_to(s_gp[:, None, None], Ft.shape[:3])
    out = ws.response(Ft, s_total, order=1)

    mesh = ws.mesh
    # micro displacement: affine macro part plus the fluctuation
    affine = mesh.nodes @ (F[0] - np.eye(2)).T
    disp = affine + cell.fluctuations

    n_q = Ft.shape[2]
    Fq = Ft[0].reshape(-1, 2, 2)
    sq = np.asarray(s_total[0]).reshape(-1)
    t = np.einsum('qij,qij->q', Fq, Fq)
    j = Fq[:, 0, 0] * Fq[:, 1, 1] - Fq[:, 0, 1] * Fq[:, 1, 0]
    s33_bare = (2.0 * ws.beta.repeat(n_q) * (t - 2.0)
                + ws.lambda_vol.repeat(n_q) * j * (j - 1.0)) / j
    # degrade like the in-plane law: quadratic in the active phase
    s33 = (1.0 - sq) ** 2 * s33_bare
    vm = von_mises_stress(out["P"][0].reshape(-1, 2, 2), Fq, s33)
    vm_cell = vm.reshape(mesh.n_elems, n_q).mean(axis=1)
    psi_cell = out["psi"][0].reshape(mesh.n_elems, n_q).mean(axis=1)

    lines = [_VTK_HEADER,
             f"unit cell {cell_index} micro state", "ASCII",
             "DATASET UNSTRUCTURED_GRID"]
    _points_block(lines, mesh.nodes + disp)
    _cells_block(lines, mesh.elements)
    lines.append(f"POINT_DATA {mesh.n_nodes}")
    _vector_field(lines, "micro_displacement", disp)
    _scalar_field(lines, "d", cell.micro_phase)
    _vector_field(lines, "reference_position", mesh.nodes)
    lines.append(f"CELL_DATA {mesh.n_elems}")
    _scalar_field(lines, "von_mises", vm_cell)
    _scalar_field(lines, "psi", psi_cell)
    _write_text(path, lines)
    return path


# -- state files ----------------------------------------------------------

_STATE_FIELDS = ("displacements", "phase", "phase_history",
                 "fluctuations", "micro_phase", "cell_phase_history",
                 "frozen", "mode", "step_index", "load_factor")


def save_state(path, state, config_text: str):
    """Write a state file: config text plus all solver fields.

    Plain zip of ``.npy`` members with frozen timestamps, so equal
    states serialize to equal bytes; readable with ``numpy.load``.
    """
    arrays = {
        "config": np.frombuffer(config_text.encode(), dtype=np.uint8),
        "displacements": state.displacements,
        "phase": state.phase,
        "phase_history": state.phase_history,
        "fluctuations": state.cells.fluctuations,
        "micro_phase": state.cells.micro_phase,
        "cell_phase_history": state.cells.phase_history,
        "frozen": state.cells.frozen,
        "mode": np.frombuffer(state.cells.mode.encode(), dtype=np.uint8),
        "step_index": np.int64(state.step_index),
        "load_factor": np.float64(state.load_factor),
    }
    try:
        with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
            for name, arr in arrays.items():
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.asarray(arr))
                info = zipfile.ZipInfo(name + ".npy",
                                       date_time=(1980, 1, 1, 0, 0, 0))
                zf.writestr(info, buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write state file {path}: {exc}") from None
    return path


def load_state(path):
    """Read a state file back into (config_text, MacroState)."""
    from .macro import MacroState

    try:
        with np.load(path) as data:
            missing = [k for k in _STATE_FIELDS if k not in data]
            if missing or "config" not in data:
                raise ConfigError(
                    f"{path}: not a state file (missing "
                    f"{', '.join(missing or ['config'])})")
            config_text = bytes(data["config"]).decode()
            batch = rve.RveBatch(
                data["fluctuations"].copy(), data["micro_phase"].copy(),
                data["cell_phase_history"].copy(), data["frozen"].copy(),
                bytes(data["mode"]).decode())
            state = MacroState(
                displacements=data["displacements"].copy(),
                phase=data["phase"].copy(),
                phase_history=data["phase_history"].copy(),
                cells=batch,
                step_index=int(data["step_index"]),
                load_factor=float(data["load_factor"]))
    except OSError as exc:
        raise OSError(f"cannot read state file {path}: {exc}") from None
    return config_text, state
