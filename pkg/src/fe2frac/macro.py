"""Macroscopic boundary value problem with one unit cell per Gauss point.

The outer displacement field (and, when fracture lives on the macro
scale, the outer phase field) is advanced by a staggered scheme: every
sweep first re-equilibrates all cells at the frozen macro fields, then
takes one Newton update of the macro fields using the condensed cell
tangents.  Load steps whose stagger stagnates are retried with bisected
increments before the step is abandoned.

Load is applied either as a uniform boundary displacement or as a
constant boundary traction, both scaled by a single load factor that a
LoadProgram ramps linearly over the requested number of steps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fem
from . import rve as rv
from .errors import ConvergenceError

_EPS_ACTIVE = 1e-12  # bound-activity window of the phase clamp


@dataclass
class LoadProgram:
    """Linear ramp of one boundary load.

    kind : "displacement_ramp" or "traction_ramp"
        Whether the load factor prescribes a boundary displacement
        magnitude or scales a base traction vector.
    increment : float
        Load-factor increase per step (mm for displacement ramps, a
        dimensionless traction multiplier otherwise).
    steps : int
        Number of ramp steps; zero means no load is applied.
    target_boundary : str
        Name of the loaded boundary side.
    """

    kind: str
    increment: float
    steps: int
    target_boundary: str

    def __post_init__(self):
        if self.kind not in ("displacement_ramp", "traction_ramp"):
            raise ValueError(f"unknown load kind '{self.kind}'")
        if not np.isfinite(self.increment):
            raise ValueError("load increment must be finite")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValueError("step count must be a non-negative integer")

    def factor(self, step: int) -> float:
        return step * self.increment


@dataclass
class MacroState:
    """Macro fields plus the per-quadrature-point cell states."""

    displacements: np.ndarray       # (n_nodes, 2)
    phase: np.ndarray               # (n_nodes,)
    phase_history: np.ndarray       # (n_nodes,)
    cells: rv.RveBatch              # one cell per Gauss point, e * 4 + q
    step_index: int = 0
    load_factor: float = 0.0

    def copy(self) -> "MacroState":
        return MacroState(self.displacements.copy(), self.phase.copy(),
                          self.phase_history.copy(), self.cells.copy(),
                          self.step_index, self.load_factor)


@dataclass
class StepRecord:
    """Diagnostics of one accepted load step."""

    load_factor: float
    sub_steps: int
    outer_sweeps: int
    mech_residuals: list = field(default_factory=list)
    phase_residuals: list = field(default_factory=list)
    reaction: np.ndarray = field(default_factory=lambda: np.zeros(2))
    cell_iterations: int = 0
    fallback_sweeps: int = 0


def checkerboard_metric(field_grid) -> float:
    """Largest deviation of an interior lattice value from the mean of
    its four neighbors, normalized by the field range.

    Zero for a constant field, one for a perfect two-color alternation;
    smooth fields score near zero because the neighbor mean reproduces
    them up to curvature.
    """
    v = np.asarray(field_grid, dtype=float)
    if v.ndim != 2:
        raise ValueError("expected a 2-d lattice of values")
    rng = float(v.max() - v.min())
    if rng == 0.0 or min(v.shape) < 3:
        return 0.0
    nb = 0.25 * (v[:-2, 1:-1] + v[2:, 1:-1] + v[1:-1, :-2] + v[1:-1, 2:])
    return float(np.abs(v[1:-1, 1:-1] - nb).max() / rng)


class MacroProblem:
    """Outer finite-element problem coupled to one cell per Gauss point.

    Parameters
    ----------
    mesh : Mesh
        Macro discretization.
    cell_ws : RveWorkspace
        Shared workspace of all cells; its mode decides whether the
        phase field lives on this mesh (macro_fracture) or inside the
        cells (micro_fracture).
    program : LoadProgram
        What is ramped and where.
    clamps : iterable of (boundary, component)
        Dirichlet components held at zero throughout.
    drive_direction : 2-sequence
        Unit displacement pattern of the target boundary per load
        factor (displacement ramps only); nonzero components become
        driven Dirichlet dofs.
    traction : 2-sequence
        Base traction on the target boundary per load factor (traction
        ramps only).
    g_c, length_scale : float
        Toughness and regularization length of the outer phase field;
        required in macro_fracture mode, ignored otherwise.
    tol : float
        Relative residual tolerance of the staggered loop.
    max_outer : int
        Stagger sweep cap per load (sub-)step.
    max_bisect : int
        How often a stagnating increment is halved before giving up.
    voigt_tangent : bool
        Drive the macro Newton updates with plain volume-averaged
        tangents instead of the condensed ones; the residuals and
        therefore the accepted equilibria are unchanged, only the
        iteration count suffers.
    """

    def __init__(self, mesh, cell_ws, program, *, clamps=(),
                 drive_direction=(1.0, 0.0), traction=(0.0, 0.0),
                 g_c=None, length_scale=None, tol=1e-6, max_outer=50,
                 max_bisect=4, voigt_tangent=False):
        self.mesh = mesh
        self.cell_ws = cell_ws
        self.program = program
        self.mode = cell_ws.mode
        self.tol = float(tol)
        self.max_outer = int(max_outer)
        self.max_bisect = int(max_bisect)
        self.voigt_tangent = bool(voigt_tangent)

        if self.mode == "macro_fracture":
            if g_c is None or length_scale is None:
                raise ValueError("macro fracture needs g_c and length_scale")
            if g_c <= 0.0 or length_scale <= 0.0:
                raise ValueError("g_c and length_scale must be positive")
        self.g_c = None if g_c is None else float(g_c)
        self.length_scale = None if length_scale is None else \
            float(length_scale)

        self.edata = fem.precompute_element_data(mesh.nodes, mesh.elements)
        self.n_gp = mesh.n_elems * len(self.edata.quad.weights)
        self.gp_weights = self.edata.detJw.reshape(-1)
        self.volume = float(self.gp_weights.sum())

        for bnd, comp in clamps:
            if bnd not in mesh.boundary:
                raise ValueError(f"unknown boundary '{bnd}'")
            if comp not in (0, 1):
                raise ValueError("component must be 0 or 1")
        if program.target_boundary not in mesh.boundary:
            raise ValueError(
                f"unknown boundary '{program.target_boundary}'")

        clamp_dofs = [mesh.boundary[b] * 2 + c for b, c in clamps]
        clamp_dofs = np.unique(np.concatenate(clamp_dofs)) if clamp_dofs \
            else np.zeros(0, dtype=int)
        self.drive_direction = np.asarray(drive_direction, dtype=float)
        drive_dofs, drive_unit = [], []
        if program.kind == "displacement_ramp":
            tnodes = mesh.boundary[program.target_boundary]
            for c in range(2):
                if self.drive_direction[c] != 0.0:
                    drive_dofs.append(tnodes * 2 + c)
                    drive_unit.append(
                        np.full(len(tnodes), self.drive_direction[c]))
            if not drive_dofs:
                raise ValueError("displacement ramp needs a nonzero "
                                 "drive direction")
        self.drive_dofs = np.concatenate(drive_dofs) if drive_dofs \
            else np.zeros(0, dtype=int)
        self.drive_unit = np.concatenate(drive_unit) if drive_unit \
            else np.zeros(0)
        if np.intersect1d(clamp_dofs, self.drive_dofs).size:
            raise ValueError("a driven dof cannot also be clamped")

        fixed = np.concatenate([clamp_dofs, self.drive_dofs])
        # increment dofmap: prescribed dofs move only through _impose,
        # Newton corrections there are zero
        self.delta_dofmap = fem.DofMap(mesh.n_nodes, 2, fixed=fixed)
        self.edofs = self.delta_dofmap.element_dofs(mesh.elements)

        self.traction = np.asarray(traction, dtype=float)
        self._unit_traction_forces = np.zeros(mesh.n_nodes * 2)
        if program.kind == "traction_ramp":
            if not np.any(self.traction):
                raise ValueError("traction ramp needs a nonzero traction")
            self._unit_traction_forces = fem.boundary_force_vector(
                mesh.nodes, mesh.boundary_edges[program.target_boundary],
                self.traction, mesh.n_nodes)

        h = np.sqrt(self.volume / mesh.n_elems)
        self.force_floor = 1e-12 * float(cell_ws.alpha.max()) * h \
            * np.sqrt(mesh.n_nodes)
        if self.mode == "macro_fracture":
            self.phase_floor = 1e-12 * self.g_c / self.length_scale \
                * h ** 2 * np.sqrt(mesh.n_nodes)

    # -- state construction and field evaluation -------------------------

    def initial_state(self) -> MacroState:
        n = self.mesh.n_nodes
        return MacroState(np.zeros((n, 2)), np.zeros(n), np.zeros(n),
                          self.cell_ws.new_batch(self.n_gp))

    def deformation_at_gauss(self, displacements):
        """Macro deformation gradient at every Gauss point, (n_gp, 2, 2)."""
        u_e = displacements[self.mesh.elements]        # (n_e, 4, 2)
        grad = np.einsum('eai,eqaj->eqij', u_e, self.edata.grads)
        grad[..., 0, 0] += 1.0
        grad[..., 1, 1] += 1.0
        return grad.reshape(self.n_gp, 2, 2)

    def phase_at_gauss(self, phase):
        """Outer phase value at every Gauss point, (n_gp,)."""
        s_e = phase[self.mesh.elements]
        return np.einsum('qa,ea->eq', self.edata.shape_values,
                         s_e).reshape(self.n_gp)

    def external_forces(self, load_factor):
        """Applied nodal force vector (2 n,) at the given load factor."""
        return load_factor * self._unit_traction_forces

    def _impose(self, state: MacroState, load_factor):
        u = state.displacements.reshape(-1)
        u[self.delta_dofmap.fixed_mask] = 0.0
        u[self.drive_dofs] = load_factor * self.drive_unit

    # -- residuals and tangents -------------------------------------------

    def solve_cells(self, state: MacroState, tol=None):
        """Equilibrate all cells at the frozen macro fields."""
        F = self.deformation_at_gauss(state.displacements)
        s = self.phase_at_gauss(state.phase)
        return rv.solve_micro_batch(self.cell_ws, F, s, state.cells, tol=tol)

    def _mech_parts(self, P, load_factor):
        """Full residual f_int - f_ext and its magnitude reference."""
        n_e = self.mesh.n_elems
        r_e = np.einsum('eqij,eqaj,eq->eai', P.reshape(n_e, 4, 2, 2),
                        self.edata.grads, self.edata.detJw).reshape(n_e, 8)
        f_int = np.zeros(self.mesh.n_nodes * 2)
        np.add.at(f_int, self.edofs.ravel(), r_e.ravel())
        f_ext = self.external_forces(load_factor)
        scale = np.zeros_like(f_int)
        np.add.at(scale, self.edofs.ravel(), np.abs(r_e).ravel())
        ref = max(float(scale.max()), float(np.abs(f_ext).max()),
                  self.force_floor)
        return f_int - f_ext, ref

    def _phase_parts(self, H, phase):
        """Full phase residual and its magnitude reference."""
        mesh, ed = self.mesh, self.edata
        n_e = mesh.n_elems
        gcl = self.g_c / self.length_scale
        s_e = phase[mesh.elements]
        s_q = np.einsum('qa,ea->eq', ed.shape_values, s_e)
        grad_s = np.einsum('eqai,ea->eqi', ed.grads, s_e)
        drive = np.einsum('eq,qa,eq->ea', H.reshape(n_e, 4),
                          ed.shape_values, ed.detJw)
        mass = gcl * np.einsum('eq,qa,eq->ea', s_q, ed.shape_values,
                               ed.detJw)
        diff = self.g_c * self.length_scale * np.einsum(
            'eqi,eqai,eq->ea', grad_s, ed.grads, ed.detJw)
        r = np.zeros(mesh.n_nodes)
        np.add.at(r, mesh.elements.ravel(), (drive + mass + diff).ravel())
        scale = np.zeros(mesh.n_nodes)
        np.add.at(scale, mesh.elements.ravel(),
                  (np.abs(drive) + np.abs(mass) + np.abs(diff)).ravel())
        ref = max(float(scale.max()), self.phase_floor)
        return r, ref

    def macro_residuals(self, state: MacroState, load_factor=None):
        """Assembled (mechanical, phase) residuals at the current cells.

        The cells are taken as they are; call solve_cells first unless
        the state is an accepted equilibrium.  The phase residual is
        identically zero when fracture lives inside the cells.
        """
        if load_factor is None:
            load_factor = state.load_factor
        F = self.deformation_at_gauss(state.displacements)
        s = self.phase_at_gauss(state.phase)
        avg = rv.homogenize_batch(self.cell_ws, F, s, state.cells)
        r_mech, _ = self._mech_parts(avg["P"], load_factor)
        if self.mode != "macro_fracture":
            return r_mech, np.zeros(self.mesh.n_nodes)
        r_phase, _ = self._phase_parts(avg["H"], state.phase)
        return r_mech, r_phase

    def _mech_matrix(self, C):
        n_e = self.mesh.n_elems
        K_e = np.einsum('eqijkl,eqaj,eqbl,eq->eaibk',
                        C.reshape(n_e, 4, 2, 2, 2, 2), self.edata.grads,
                        self.edata.grads, self.edata.detJw,
                        optimize=True).reshape(n_e, 8, 8)
        n = self.mesh.n_nodes * 2
        return fem.scatter_coo(K_e, self.edofs, self.edofs, (n, n)).tocsr()

    def _phase_matrix(self, Q):
        mesh, ed = self.mesh, self.edata
        n_e = mesh.n_elems
        gcl = self.g_c / self.length_scale
        coef = Q.reshape(n_e, 4) + gcl                 # drive slope + mass
        K_e = np.einsum('eq,qa,qb,eq->eab', coef, ed.shape_values,
                        ed.shape_values, ed.detJw)
        K_e += self.g_c * self.length_scale * np.einsum(
            'eqai,eqbi,eq->eab', ed.grads, ed.grads, ed.detJw)
        n = mesh.n_nodes
        return fem.scatter_coo(K_e, mesh.elements, mesh.elements,
                               (n, n)).tocsr()

    def _phase_clamp(self, state: MacroState, r_phase):
        s, hist = state.phase, state.phase_history
        lower = (s <= hist + _EPS_ACTIVE) & (r_phase > 0.0)
        upper = (s >= 1.0 - _EPS_ACTIVE) & (r_phase < 0.0)
        return lower | upper

    # -- staggered solve ---------------------------------------------------

    def _advance_once(self, state: MacroState, load_factor, tol,
                      record: StepRecord):
        """One accepted sub-step; mutates state, raises on stagnation."""
        mesh = self.mesh
        macro_phase = self.mode == "macro_fracture"
        self._impose(state, load_factor)
        record.mech_residuals = []
        record.phase_residuals = []
        for sweep in range(1, self.max_outer + 1):
            info = self.solve_cells(state)
            record.cell_iterations += int(info["iterations"].sum())
            record.fallback_sweeps += int(info["fallback_sweeps"].sum())
            F = self.deformation_at_gauss(state.displacements)
            s_gp = self.phase_at_gauss(state.phase)
            avg = rv.homogenize_batch(self.cell_ws, F, s_gp, state.cells)
            r_mech, ref_m = self._mech_parts(avg["P"], load_factor)
            rn_m = float(np.abs(
                self.delta_dofmap.reduce_vector(r_mech)).max()) \
                if self.delta_dofmap.n_reduced else 0.0
            record.mech_residuals.append(rn_m)
            if macro_phase:
                r_phase, ref_s = self._phase_parts(avg["H"], state.phase)
                clamped = self._phase_clamp(state, r_phase)
                proj = np.where(clamped, 0.0, r_phase)
                rn_s = float(np.abs(proj).max())
                record.phase_residuals.append(rn_s)
            else:
                rn_s, ref_s = 0.0, 1.0
            record.outer_sweeps += 1
            if rn_m <= tol * ref_m and rn_s <= tol * ref_s:
                record.reaction = self.boundary_reaction(
                    r_mech, self.program.target_boundary)
                self._commit(state, load_factor)
                return
            tang = rv.condensed_tangent_batch(
                self.cell_ws, F, s_gp, state.cells,
                voigt_tangent=self.voigt_tangent)
            K = self._mech_matrix(tang["dP_dF"])
            S = self.delta_dofmap.selection
            sys = fem.SparseSystem((S.T @ K @ S).tocsr(),
                                   -self.delta_dofmap.reduce_vector(r_mech),
                                   self.delta_dofmap)
            state.displacements += sys.solve().reshape(-1, 2)
            if macro_phase:
                J = self._phase_matrix(tang["dH_ds"])
                dm = fem.DofMap(mesh.n_nodes, 1,
                                fixed=np.nonzero(clamped)[0])
                Sp = dm.selection
                psys = fem.SparseSystem((Sp.T @ J @ Sp).tocsr(),
                                        -dm.reduce_vector(r_phase), dm)
                state.phase = np.clip(state.phase + psys.solve(),
                                      state.phase_history, 1.0)
        raise ConvergenceError(
            f"staggered loop stagnated after {self.max_outer} sweeps at "
            f"load factor {load_factor:.6g}",
            diagnostics={"mech_residual": rn_m, "phase_residual": rn_s,
                         "state": state})

    def _commit(self, state: MacroState, load_factor):
        state.phase_history = state.phase.copy()
        np.maximum(state.cells.phase_history, state.cells.micro_phase,
                   out=state.cells.phase_history)
        state.load_factor = float(load_factor)

    def staggered_step(self, state: MacroState, load_factor, tol=None):
        """Advance the state to the given load factor.

        Returns the accepted state (the input is untouched) and a
        StepRecord.  A stagnating increment is bisected up to
        max_bisect times; if the finest subdivision still stagnates,
        the ConvergenceError carries the last failed trial state for a
        diagnostic dump.
        """
        tol = self.tol if tol is None else float(tol)
        start = state.load_factor
        last_err = None
        for halvings in range(self.max_bisect + 1):
            n_sub = 2 ** halvings
            trial = state.copy()
            record = StepRecord(load_factor=float(load_factor),
                                sub_steps=n_sub, outer_sweeps=0)
            try:
                for k in range(1, n_sub + 1):
                    fac = start + (load_factor - start) * k / n_sub
                    self._advance_once(trial, fac, tol, record)
            except ConvergenceError as err:
                last_err = err
                continue
            trial.step_index = state.step_index + 1
            return trial, record
        raise ConvergenceError(
            f"load step to {load_factor:.6g} failed after "
            f"{self.max_bisect} bisections: {last_err}",
            diagnostics={"state": trial, "cause": last_err})

    # -- post-processing ----------------------------------------------------

    def boundary_reaction(self, r_mech, boundary):
        """Constraint force resultant on a named boundary.

        Sums the out-of-balance internal-minus-external force over the
        boundary's node dofs; on constrained dofs this is the force the
        constraint supplies.
        """
        nodes = self.mesh.boundary[boundary]
        return np.array([r_mech[nodes * 2].sum(),
                         r_mech[nodes * 2 + 1].sum()])

    def reactions(self, state: MacroState, boundary=None, load_factor=None):
        """Reaction resultant of an accepted state, (2,)."""
        if boundary is None:
            boundary = self.program.target_boundary
        r_mech, _ = self.macro_residuals(state, load_factor)
        return self.boundary_reaction(r_mech, boundary)

    def freeze_sweep(self, state: MacroState, threshold) -> MacroState:
        """Mark cells at Gauss points whose interpolated outer phase
        exceeds the threshold as frozen; once frozen, a cell stays
        frozen and responds with its zero-fluctuation average."""
        if self.mode != "macro_fracture":
            raise ValueError("freezing applies to macro_fracture mode")
        s_gp = self.phase_at_gauss(state.phase)
        state.cells.frozen |= s_gp > threshold
        state.cells.fluctuations[state.cells.frozen] = 0.0
        return state

    def cell_peak_grid(self, state: MacroState):
        """Per-element peak micro phase on the element lattice."""
        peak = state.cells.micro_phase.max(axis=1).reshape(
            self.mesh.n_elems, 4).max(axis=1)
        rows, cols = self.mesh.grid_shape
        return peak.reshape(rows - 1, cols - 1)

    def checkerboard_metric(self, state: MacroState) -> float:
        """Neighbor-contrast score of the per-element peak micro phase."""
        return checkerboard_metric(self.cell_peak_grid(state))
