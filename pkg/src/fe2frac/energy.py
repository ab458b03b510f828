"""Incremental energy bookkeeping of a two-scale fracture run.

Every accepted load step is booked as four channels: external work
(trapezoidal in the boundary forces), stored energy change (volume
integral of the averaged cell energy), micro fracture dissipation
(cell crack-surface energy growth) and macro fracture dissipation
(outer crack-surface energy growth).  Whatever the four channels do
not explain is the step's balance defect; it measures the combined
integration and staggering error and must stay a small fraction of the
work put in.
"""
from __future__ import annotations

import numpy as np

from . import rve as rv
from .errors import IrreversibilityError

_COLUMNS = ("step", "ext_work", "int_energy", "D_mi", "D_ma", "defect",
            "cumulative_defect")


class EnergyLedger:
    """Ordered per-step energy rows with running totals."""

    def __init__(self):
        self.rows = []
        self.cumulative = {"ext_work": 0.0, "int_energy": 0.0,
                           "D_mi": 0.0, "D_ma": 0.0, "defect": 0.0}

    def __len__(self):
        return len(self.rows)

    # -- step accounting -------------------------------------------------

    def record_step(self, problem, state_old, state_new) -> dict:
        """Book the increments between two accepted equilibria.

        Both states must carry converged cells at their own load
        factors.  Negative dissipation beyond round-off raises; noise
        inside the guard band is booked as zero so the cumulative
        dissipations never decrease.
        """
        W = _external_work(problem, state_old, state_new)
        dE = _stored_energy(problem, state_new) \
            - _stored_energy(problem, state_old)
        D_mi = float(np.dot(
            problem.gp_weights,
            rv.micro_dissipation_batch(problem.cell_ws, state_old.cells,
                                       state_new.cells)))
        D_ma = _macro_dissipation(problem, state_old, state_new)
        scale = max(1.0, abs(W), abs(dE))
        if D_ma < -1e-10 * scale:
            raise IrreversibilityError(
                f"outer crack energy decreased by {D_ma:.3e}")
        D_mi = max(D_mi, 0.0)
        D_ma = max(D_ma, 0.0)
        defect = W - dE - D_mi - D_ma
        row = {"step": state_new.step_index, "ext_work": W,
               "int_energy": dE, "D_mi": D_mi, "D_ma": D_ma,
               "defect": defect}
        for key in self.cumulative:
            self.cumulative[key] += row[key]
        row["cumulative_defect"] = self.cumulative["defect"]
        self.rows.append(row)
        return row

    # -- reporting ---------------------------------------------------------

    def balance_report(self) -> dict:
        """Cumulative totals plus the step with the worst defect."""
        report = dict(self.cumulative)
        work = abs(self.cumulative["ext_work"])
        report["relative_defect"] = abs(self.cumulative["defect"]) \
            / max(work, 1e-30)
        if self.rows:
            worst = max(self.rows, key=lambda r: abs(r["defect"]))
            report["worst_step"] = worst["step"]
            report["worst_defect"] = worst["defect"]
        else:
            report["worst_step"] = None
            report["worst_defect"] = 0.0
        return report

    def to_table(self) -> str:
        """Tab-separated table of all rows, one line per step."""
        lines = ["\t".join(_COLUMNS)]
        for row in self.rows:
            cells = [str(row["step"])]
            cells += [f"{row[c]:.17g}" for c in _COLUMNS[1:]]
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"


def _external_work(problem, state_old, state_new):
    """Trapezoidal work of tractions and constraint forces."""
    du = (state_new.displacements - state_old.displacements).reshape(-1)
    force = np.zeros_like(du)
    for state in (state_old, state_new):
        f_ext = problem.external_forces(state.load_factor)
        r_mech, _ = problem.macro_residuals(state)
        f = f_ext.copy()
        fixed = problem.delta_dofmap.fixed_mask
        f[fixed] += r_mech[fixed]       # reaction supplied by the support
        force += 0.5 * f
    return float(force @ du)


def _stored_energy(problem, state):
    F = problem.deformation_at_gauss(state.displacements)
    s = problem.phase_at_gauss(state.phase)
    avg = rv.homogenize_batch(problem.cell_ws, F, s, state.cells)
    return float(problem.gp_weights @ avg["psi"])


def _macro_dissipation(problem, state_old, state_new):
    if problem.mode != "macro_fracture":
        return 0.0
    ll = problem.length_scale

    def surface(phase):
        ed = problem.edata
        s_e = phase[problem.mesh.elements]
        s_q = np.einsum('qa,ea->eq', ed.shape_values, s_e)
        grad = np.einsum('eqai,ea->eqi', ed.grads, s_e)
        gam = s_q ** 2 / (2.0 * ll) + 0.5 * ll * np.sum(grad ** 2, axis=-1)
        return float((ed.detJw * gam).sum())

    return problem.g_c * (surface(state_new.phase)
                          - surface(state_old.phase))
