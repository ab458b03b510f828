"""Unit-cell equilibrium, homogenization and condensed tangents.

Every macro quadrature point carries one unit cell (RVE) discretized on
a shared mesh.  The micro unknowns are the fluctuation field w on top of
the affine map given by the macro deformation gradient and, when the
fracture channel lives on the micro scale, the micro phase field d.
Supported fluctuation spaces:

    voigt     w = 0 everywhere (Taylor assumption)
    linear    w = 0 on the cell boundary
    periodic  w identical on opposite boundary faces, corners pinned

The solver is monolithic Newton on (w, d) with irreversibility enforced
by clamping d to its history from below; clamped rows are removed from
the projected residual and from the linearized system, which keeps the
condensed tangents consistent with the active set.

Everything is batched: state arrays carry a leading RVE axis and the
linearized cell systems are assembled through a precomputed sparse
scatter operator into dense (B, n, n) stacks solved with the batched
LAPACK driver.  Single-cell convenience wrappers operate on batches of
one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import constitutive, fem
from .errors import ConvergenceError, IrreversibilityError
from .mesh import Mesh

BC_MODES = ("voigt", "linear_displacement", "periodic")
RUN_MODES = ("micro_fracture", "macro_fracture")

# Unit macro-gradient perturbations, column order (0,0),(0,1),(1,0),(1,1)
# followed by the macro phase column.
_UNIT_F = np.zeros((5, 2, 2))
for _c, (_i, _j) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
    _UNIT_F[_c, _i, _j] = 1.0


@dataclass
class RveState:
    """State of a single unit cell.

    fluctuations : (n_nodes, 2); micro_phase, phase_history : (n_nodes,).
    ``frozen`` pins the fluctuations at zero (the cell degenerates to the
    Taylor assumption); ``mode`` names the active fracture channel.
    """

    fluctuations: np.ndarray
    micro_phase: np.ndarray
    phase_history: np.ndarray
    frozen: bool
    mode: str


class RveBatch:
    """Struct-of-arrays state of one cell per macro quadrature point."""

    def __init__(self, fluctuations, micro_phase, phase_history, frozen,
                 mode):
        self.fluctuations = fluctuations
        self.micro_phase = micro_phase
        self.phase_history = phase_history
        self.frozen = frozen
        self.mode = mode

    @classmethod
    def zeros(cls, n_nodes: int, count: int, mode: str):
        return cls(np.zeros((count, n_nodes, 2)), np.zeros((count, n_nodes)),
                   np.zeros((count, n_nodes)), np.zeros(count, dtype=bool),
                   mode)

    def __len__(self):
        return len(self.frozen)

    def state(self, k: int) -> RveState:
        return RveState(self.fluctuations[k].copy(),
                        self.micro_phase[k].copy(),
                        self.phase_history[k].copy(),
                        bool(self.frozen[k]), self.mode)

    def set_state(self, k: int, state: RveState):
        self.fluctuations[k] = state.fluctuations
        self.micro_phase[k] = state.micro_phase
        self.phase_history[k] = state.phase_history
        self.frozen[k] = state.frozen

    def copy(self):
        return RveBatch(self.fluctuations.copy(), self.micro_phase.copy(),
                        self.phase_history.copy(), self.frozen.copy(),
                        self.mode)


@dataclass
class HomogenizedResponse:
    """Volume averages and condensed sensitivities of one cell."""

    P: np.ndarray
    H_macro: float | np.ndarray
    psi: float | np.ndarray
    dP_dF: np.ndarray | None = None
    dP_ds: np.ndarray | None = None
    dH_dF: np.ndarray | None = None
    dH_ds: float | np.ndarray | None = None


class _OperatorSet:
    """Scatter operators of one (mech, phase) dof layout."""

    def __init__(self, ws, has_mech: bool, has_phase: bool):
        self.has_mech = has_mech
        self.has_phase = has_phase
        n_e = ws.mesh.n_elems
        blocks = []
        if has_mech:
            mech_edofs = ws.mech_dofmap.element_dofs(ws.mesh.elements)
            blocks.append(ws.mech_dofmap.reduced_index[mech_edofs])
            self.n_mech = ws.mech_dofmap.n_reduced
        else:
            self.n_mech = 0
        if has_phase:
            blocks.append(self.n_mech + ws.mesh.elements)
        self.eids = np.concatenate(blocks, axis=1) if blocks else \
            np.zeros((n_e, 0), dtype=int)
        self.k_local = self.eids.shape[1]
        self.n_total = self.n_mech + (ws.mesh.n_nodes if has_phase else 0)

        eids = self.eids
        k, nt = self.k_local, self.n_total
        valid = eids >= 0
        # matrix scatter: local (e, p, q) entry -> dense row-major slot
        pv = valid[:, :, None] & valid[:, None, :]
        rows = (eids[:, :, None] * nt + eids[:, None, :])[pv]
        cols = np.broadcast_to(
            np.arange(n_e * k * k).reshape(n_e, k, k), pv.shape)[pv]
        self.mat_op = sp.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(nt * nt, n_e * k * k))
        rows_v = eids[valid]
        cols_v = np.broadcast_to(
            np.arange(n_e * k).reshape(n_e, k), valid.shape)[valid]
        self.vec_op = sp.csr_matrix(
            (np.ones(len(rows_v)), (rows_v, cols_v)), shape=(nt, n_e * k))
        # expansion gathers: reduced solution -> full nodal fields
        if has_mech:
            self.w_gather = ws.mech_dofmap.reduced_index.copy()
        self.phase_offset = self.n_mech

    def scatter_matrix(self, K_local):
        B = K_local.shape[0]
        flat = K_local.reshape(B, -1)
        out = (self.mat_op @ flat.T).T
        return out.reshape(B, self.n_total, self.n_total)

    def scatter_vector(self, r_local):
        B = r_local.shape[0]
        return (self.vec_op @ r_local.reshape(B, -1).T).T

    def expand_mech(self, sol):
        """(B, nt, m) reduced columns -> (B, n_nodes, 2, m) fluctuations."""
        B, _, m = sol.shape
        n_full = len(self.w_gather)
        idx = self.w_gather
        out = np.where((idx >= 0)[None, :, None],
                       sol[:, np.clip(idx, 0, None), :], 0.0)
        return out.reshape(B, n_full // 2, 2, m)


class RveWorkspace:
    """Shared discretization, materials and operators of all cells.

    Parameters
    ----------
    mesh : Mesh
    materials : dict
        Region tag to :class:`~fe2frac.constitutive.MaterialParams`.
    bc : {"voigt", "linear_displacement", "periodic"}
    mode : {"micro_fracture", "macro_fracture"}
    split_mode : {"principal", "isochoric"}
    tol : float
        Relative drop of the first-iterate projected residual.
    """

    def __init__(self, mesh: Mesh, materials: dict, bc: str, mode: str,
                 split_mode: str = "principal", tol: float = 1e-8,
                 max_iter: int = 25, max_sweeps: int = 400,
                 chunk_size: int = 256):
        if bc not in BC_MODES:
            raise ValueError(f"unknown bc {bc!r}")
        if mode not in RUN_MODES:
            raise ValueError(f"unknown mode {mode!r}")
        missing = set(mesh.region.tolist()) - set(materials)
        if missing:
            raise ValueError(f"materials missing for regions {sorted(missing)}")
        self.mesh = mesh
        self.materials = materials
        self.bc = bc
        self.mode = mode
        self.split_mode = split_mode
        self.tol = tol
        self.max_iter = max_iter
        self.max_sweeps = max_sweeps
        self.chunk_size = chunk_size

        self.edata = fem.precompute_element_data(mesh.nodes, mesh.elements)
        self.volume = float(self.edata.detJw.sum())
        for name in ("alpha", "beta", "lambda_vol", "g_c", "length_scale"):
            setattr(self, name, np.array(
                [getattr(materials[tag], name) for tag in mesh.region]))

        self.mech_dofmap = self._build_mech_dofmap() if bc != "voigt" else None
        self._ops = {}
        # projected-residual floor: round-off on stiffness-scale forces
        h = np.sqrt(self.volume / mesh.n_elems)
        self.force_floor = 1e-12 * float(self.alpha.max()) * h \
            * np.sqrt(mesh.n_nodes)

    def _build_mech_dofmap(self):
        mesh = self.mesh
        if self.bc == "linear_displacement":
            bnodes = np.unique(np.concatenate(list(mesh.boundary.values())))
            fixed = np.concatenate([bnodes * 2, bnodes * 2 + 1])
            return fem.DofMap(mesh.n_nodes, 2, fixed=fixed)
        # periodic: opposite faces paired by grid position, corners pinned
        g = mesh.grid_ids
        corners = np.array([g[0, 0], g[0, -1], g[-1, -1], g[-1, 0]])
        fixed = np.concatenate([corners * 2, corners * 2 + 1])
        slaves = np.concatenate([g[1:-1, -1], g[-1, 1:-1]])
        masters = np.concatenate([g[1:-1, 0], g[0, 1:-1]])
        pairs = np.column_stack([
            np.concatenate([slaves * 2, slaves * 2 + 1]),
            np.concatenate([masters * 2, masters * 2 + 1])])
        return fem.DofMap(mesh.n_nodes, 2, fixed=fixed, pairs=pairs)

    def operators(self, has_mech: bool, has_phase: bool) -> _OperatorSet:
        key = (has_mech, has_phase)
        if key not in self._ops:
            self._ops[key] = _OperatorSet(self, has_mech, has_phase)
        return self._ops[key]

    def new_state(self) -> RveState:
        n = self.mesh.n_nodes
        return RveState(np.zeros((n, 2)), np.zeros(n), np.zeros(n), False,
                        self.mode)

    def new_batch(self, count: int) -> RveBatch:
        return RveBatch.zeros(self.mesh.n_nodes, count, self.mode)

    # -- field evaluation ------------------------------------------------

    def micro_gradients(self, F, w):
        """Total micro deformation gradient at quadrature points."""
        w_e = w[:, self.mesh.elements]                 # (B, n_e, 4, 2)
        gradw = np.einsum('beni,eqnj->beqij', w_e, self.edata.grads)
        return F[:, None, None] + gradw

    def phase_at_gauss(self, d):
        d_e = d[:, self.mesh.elements]
        val = np.einsum('qn,ben->beq', self.edata.shape_values, d_e)
        grad = np.einsum('ben,eqnj->beqj', d_e, self.edata.grads)
        return val, grad

    def response(self, Ft, s_total, order):
        return constitutive.response_fields(
            Ft, s_total, self.alpha[None, :, None], self.beta[None, :, None],
            self.lambda_vol[None, :, None], split_mode=self.split_mode,
            order=order)

    def volume_average(self, gp_field):
        """Average a (B, n_e, q, ...) quadrature field over the cell."""
        w = self.edata.detJw
        extra = gp_field.ndim - 3
        wexp = w.reshape((1,) + w.shape + (1,) * extra)
        return (gp_field * wexp).sum(axis=(1, 2)) / self.volume


def _element_systems(ws, F, s, w, d, has_phase, order=2,
                     mech_dofs=True, phase_dofs=None):
    """Local residuals, tangent blocks and sensitivity columns.

    has_phase states whether the micro phase field enters the total
    degradation; mech_dofs / phase_dofs pick which equation blocks are
    stacked into the local residual r (B, n_e, k) and, for order 2,
    the local matrix K and the five sensitivity columns G (macro
    gradient components and macro phase).  Splitting the flags lets
    one field be equilibrated while the other is held fixed.
    """
    if phase_dofs is None:
        phase_dofs = has_phase
    mesh, ed = ws.mesh, ws.edata
    Ft = ws.micro_gradients(F, w)
    jac = Ft[..., 0, 0] * Ft[..., 1, 1] - Ft[..., 0, 1] * Ft[..., 1, 0]
    if np.any(jac <= 0.0):
        return {"bad": np.any(jac <= 0.0, axis=(1, 2))}
    if has_phase:
        d_q, grad_d = ws.phase_at_gauss(d)
        s_total = s[:, None, None] + d_q
    else:
        d_q = grad_d = None
        s_total = np.broadcast_to(s[:, None, None],
                                  Ft.shape[:-2]).copy()
    resp = ws.response(Ft, s_total, order)
    out = {"bad": None, "resp": resp, "Ft": Ft, "s_total": s_total}

    detJw, grads, Nv = ed.detJw, ed.grads, ed.shape_values
    B = F.shape[0]
    r_blocks = []
    if mech_dofs:
        r_w = np.einsum('beqij,eqnj,eq->beni', resp["P"], grads, detJw)
        r_blocks.append(r_w.reshape(B, mesh.n_elems, 8))
    if has_phase:
        gcl = (ws.g_c / ws.length_scale)[None, :, None]
        stiff = (ws.g_c * ws.length_scale)[None, :, None]
    if phase_dofs:
        bulk = resp["H"] + gcl * d_q
        r_d = (np.einsum('qn,beq,eq->ben', Nv, bulk, detJw)
               + np.einsum('eqnj,beqj,eq->ben', grads,
                           stiff[..., None] * grad_d, detJw))
        r_blocks.append(r_d)
    out["r"] = np.concatenate(r_blocks, axis=2) if r_blocks else \
        np.zeros((B, mesh.n_elems, 0))
    if order < 2:
        return out

    kdim = (8 if mech_dofs else 0) + (4 if phase_dofs else 0)
    off = 8 if mech_dofs else 0
    K = np.zeros((B, mesh.n_elems, kdim, kdim))
    G = np.zeros((B, mesh.n_elems, kdim, 5))
    if mech_dofs:
        K[:, :, :8, :8] = np.einsum(
            'eqnj,beqijkl,eqml,eq->benimk', grads, resp["C"], grads,
            detJw).reshape(B, mesh.n_elems, 8, 8)
        G[:, :, :8, :4] = np.einsum(
            'eqnj,beqijkl,eq->benikl', grads, resp["C"], detJw) \
            .reshape(B, mesh.n_elems, 8, 4)
        G[:, :, :8, 4] = np.einsum(
            'eqnj,beqij,eq->beni', grads, resp["D"], detJw) \
            .reshape(B, mesh.n_elems, 8)
    if phase_dofs:
        mass = np.einsum('qn,beq,qm,eq->benm', Nv, resp["Q"] + gcl, Nv,
                         detJw)
        # gradient stiffness is state independent: geometry times g_c l
        lap = np.einsum('eqnj,eqmj,eq->enm', grads, grads, detJw) \
            * (ws.g_c * ws.length_scale)[:, None, None]
        K[:, :, off:, off:] = mass + lap[None]
        G[:, :, off:, :4] = np.einsum(
            'qn,beqkl,eq->benkl', Nv, resp["D"], detJw) \
            .reshape(B, mesh.n_elems, 4, 4)
        G[:, :, off:, 4] = np.einsum('qn,beq,eq->ben', Nv, resp["Q"],
                                     detJw)
    if mech_dofs and phase_dofs:
        K_wd = np.einsum('eqnj,beqij,qm,eq->benim', grads, resp["D"],
                         Nv, detJw).reshape(B, mesh.n_elems, 8, 4)
        K[:, :, :8, 8:] = K_wd
        K[:, :, 8:, :8] = np.swapaxes(K_wd, 2, 3)
    out["K"] = K
    out["G"] = G
    return out


# bound-activity detection on the micro phase
_CLAMP_ATOL = 1e-12


def _clamp_mask(d, hist, r_d):
    """Nodes held at a bound by the sign of their residual."""
    lower = (d <= hist + _CLAMP_ATOL) & (r_d > 0.0)
    upper = (d >= 1.0 - _CLAMP_ATOL) & (r_d < 0.0)
    return lower | upper


def _eliminate(M, clamped):
    """Zero clamped rows/columns, unit-scale their diagonal, in place."""
    if not clamped.any():
        return M
    keep = (~clamped).astype(float)
    M *= keep[:, :, None] * keep[:, None, :]
    nt = M.shape[1]
    diag_scale = np.abs(M[:, np.arange(nt), np.arange(nt)]).mean(axis=1)
    diag_scale = np.maximum(diag_scale, 1.0)
    b_idx, r_idx = np.nonzero(clamped)
    M[b_idx, r_idx, r_idx] = diag_scale[b_idx]
    return M


def _newton_subset(ws, ops, F, s, w, d, hist, tol):
    """Newton on one uniform sub-batch dof layout; mutates w and d.

    Convergence is the drop of the projected residual norm below
    tol times its first-iterate value (with an absolute round-off
    floor).  Trial states with non-positive micro Jacobians or a
    growing projected residual trigger per-cell step halving before
    the update is committed.  Cells still above threshold at the
    iteration cap are reported, not raised, so the caller can fall
    back to a sturdier scheme.
    """
    B = len(F)
    phys = ws.mode == "micro_fracture"
    iters = np.zeros(B, dtype=int)
    res_hist = [[] for _ in range(B)]
    stalled = np.zeros(B, dtype=bool)
    out_info = {"iterations": iters, "residual_histories": res_hist,
                "stalled": stalled, "thresh": np.zeros(B)}
    if ops.n_total == 0:
        return out_info

    act = np.ones(B, dtype=bool)
    thresh = np.full(B, -1.0)
    for it in range(ws.max_iter + 1):
        idx = np.nonzero(act)[0]
        if len(idx) == 0:
            break
        sys = _element_systems(ws, F[idx], s[idx], w[idx], d[idx],
                               phys, order=2, mech_dofs=ops.has_mech,
                               phase_dofs=ops.has_phase)
        if sys["bad"] is not None:
            raise ConvergenceError(
                "non-physical micro state at committed iterate",
                diagnostics={"cells": idx[sys["bad"]]})
        R = ops.scatter_vector(sys["r"])
        clamped = np.zeros(R.shape, dtype=bool)
        if ops.has_phase:
            off = ops.phase_offset
            clamped[:, off:] = _clamp_mask(d[idx], hist[idx], R[:, off:])
        Rp = np.where(clamped, 0.0, R)
        rn = np.linalg.norm(Rp, axis=1)
        for k, b in enumerate(idx):
            res_hist[b].append(rn[k])
        fresh = thresh[idx] < 0.0
        thresh[idx[fresh]] = np.maximum(tol * rn[fresh], ws.force_floor)
        done = rn <= thresh[idx]
        act[idx[done]] = False
        if done.all():
            break
        if it == ws.max_iter:
            stalled[idx[~done]] = True
            break

        cont = ~done
        still = idx[cont]
        M = ops.scatter_matrix(sys["K"][cont])
        _eliminate(M, clamped[cont])
        delta = np.linalg.solve(M, -Rp[cont][..., None])[..., 0]

        if ops.has_mech:
            dw = ops.expand_mech(delta[:, :, None])[..., 0]
        else:
            dw = np.zeros((len(still),) + w.shape[1:])
        dd = delta[:, ops.phase_offset:] if ops.has_phase else \
            np.zeros((len(still),) + d.shape[1:])

        # commit with per-cell backtracking: halve the step while the
        # trial has a non-positive micro Jacobian or fails to shrink
        # the projected residual.  Without the merit test the clamp
        # set can two-cycle and stall at a finite residual.
        rn_cur = rn[cont]
        thr_cur = thresh[still]
        lam = np.ones(len(still))
        rn_best = np.full(len(still), np.inf)
        w_best = w[still].copy()
        d_best = d[still].copy()
        settled = np.zeros(len(still), dtype=bool)
        for attempt in range(8):
            tr = ~settled
            w_t = w[still][tr] + lam[tr, None, None] * dw[tr]
            d_t = np.clip(d[still][tr] + lam[tr, None] * dd[tr],
                          hist[still][tr], 1.0)
            Ft = ws.micro_gradients(F[still][tr], w_t)
            jac = Ft[..., 0, 0] * Ft[..., 1, 1] - Ft[..., 0, 1] * Ft[..., 1, 0]
            feas = np.all(jac > 1e-12, axis=(1, 2))
            rn_t = np.full(tr.sum(), np.inf)
            if feas.any():
                fi = np.nonzero(feas)[0]
                sub = still[tr][fi]
                sys_t = _element_systems(ws, F[sub], s[sub], w_t[fi],
                                         d_t[fi], phys, order=1,
                                         mech_dofs=ops.has_mech,
                                         phase_dofs=ops.has_phase)
                R_t = ops.scatter_vector(sys_t["r"])
                cl_t = np.zeros(R_t.shape, dtype=bool)
                if ops.has_phase:
                    off = ops.phase_offset
                    cl_t[:, off:] = _clamp_mask(d_t[fi], hist[sub],
                                                R_t[:, off:])
                rn_t[fi] = np.linalg.norm(np.where(cl_t, 0.0, R_t), axis=1)
            better = rn_t < rn_best[tr]
            gi = np.nonzero(tr)[0][better]
            rn_best[gi] = rn_t[better]
            w_best[gi] = w_t[better]
            d_best[gi] = d_t[better]
            good = (rn_t <= (1.0 - 1e-4 * lam[tr]) * rn_cur[tr]) \
                | (rn_t <= thr_cur[tr])
            settled[np.nonzero(tr)[0][good]] = True
            if settled.all():
                break
            lam[~settled] *= 0.5
        if np.isinf(rn_best).any():
            raise ConvergenceError(
                "micro Newton step cannot preserve positive Jacobians",
                diagnostics={"cells": still[np.isinf(rn_best)]})
        # cells with no strict decrease keep their best trial anyway;
        # the iteration cap bounds how long that can go on
        w[still] = w_best
        d[still] = d_best
        iters[still] += 1
    out_info["thresh"][:] = np.where(thresh < 0.0, ws.force_floor, thresh)
    return out_info


def _group_masks(ws, batch):
    """Partition cells by whether fluctuations are live."""
    taylor = batch.frozen | (ws.bc == "voigt")
    return [(~taylor, ws.bc != "voigt"), (taylor, False)]


def _alternate_fields(ws, has_mech, F, s, w, d, hist, thresh):
    """Field-staggered fallback for cells the coupled Newton stalls on.

    Alternates equilibrating the fluctuations at frozen micro phase
    with equilibrating the phase at frozen fluctuations.  Each sweep
    of a descent pair cannot raise the incremental potential, which
    carries the iterate past unstable configurations where the
    coupled step direction cycles.  Returns the sweep count; raises
    if the coupled projected residual is still above threshold after
    the sweep cap.
    """
    ops_full = ws.operators(has_mech, True)
    ops_p = ws.operators(False, True)
    sweeps = np.zeros(len(F), dtype=int)
    pend = np.arange(len(F))
    for sweep in range(ws.max_sweeps):
        wp, dp, hp = w[pend], d[pend], hist[pend]
        if has_mech:
            _newton_subset(ws, ws.operators(True, False), F[pend],
                           s[pend], wp, dp, hp, ws.tol)
        _newton_subset(ws, ops_p, F[pend], s[pend], wp, dp, hp, ws.tol)
        w[pend], d[pend] = wp, dp
        sweeps[pend] += 1
        sys = _element_systems(ws, F[pend], s[pend], wp, dp,
                               True, order=1, mech_dofs=has_mech)
        if sys["bad"] is not None:
            raise ConvergenceError(
                "non-physical micro state during staggered fallback",
                diagnostics={"cells": pend[sys["bad"]]})
        R = ops_full.scatter_vector(sys["r"])
        off = ops_full.phase_offset
        cl = np.zeros(R.shape, dtype=bool)
        cl[:, off:] = _clamp_mask(dp, hp, R[:, off:])
        rn = np.linalg.norm(np.where(cl, 0.0, R), axis=1)
        done = rn <= thresh[pend]
        pend = pend[~done]
        if len(pend) == 0:
            return sweeps
    raise ConvergenceError(
        f"staggered micro fallback exceeded {ws.max_sweeps} sweeps "
        f"({len(pend)} cell(s), worst residual {rn[~done].max():.3e})",
        diagnostics={"cells": pend, "worst_residual": float(rn[~done].max())})


def solve_micro_batch(ws: RveWorkspace, F, s, batch: RveBatch, tol=None):
    """Equilibrate every cell of the batch at (F, s); mutates the batch.

    Returns a dict with per-cell Newton iteration counts and projected
    residual histories.  Cells whose coupled Newton stalls inside the
    iteration cap are finished by the field-staggered fallback; a cell
    neither can settle raises ConvergenceError.
    """
    if batch.mode != ws.mode:
        raise ValueError("batch mode does not match workspace mode")
    tol = ws.tol if tol is None else tol
    has_phase = ws.mode == "micro_fracture"
    B = len(batch)
    batch.fluctuations[batch.frozen] = 0.0
    info = {"iterations": np.zeros(B, dtype=int),
            "residual_histories": [None] * B,
            "fallback_sweeps": np.zeros(B, dtype=int)}
    for mask, has_mech in _group_masks(ws, batch):
        idx_all = np.nonzero(mask)[0]
        if len(idx_all) == 0:
            continue
        ops = ws.operators(has_mech, has_phase)
        for lo in range(0, len(idx_all), ws.chunk_size):
            idx = idx_all[lo:lo + ws.chunk_size]
            w = batch.fluctuations[idx]
            d = batch.micro_phase[idx]
            hist = batch.phase_history[idx]
            out = _newton_subset(ws, ops, F[idx], s[idx], w, d, hist, tol)
            if out["stalled"].any():
                if not has_phase:
                    bad = idx[out["stalled"]]
                    raise ConvergenceError(
                        f"micro Newton exceeded {ws.max_iter} iterations "
                        f"({len(bad)} cell(s))",
                        diagnostics={"cells": bad})
                st = np.nonzero(out["stalled"])[0]
                w_st, d_st = w[st], d[st]
                sweeps = _alternate_fields(
                    ws, has_mech, F[idx][st], s[idx][st], w_st, d_st,
                    hist[st], out["thresh"][st])
                w[st], d[st] = w_st, d_st
                info["fallback_sweeps"][idx[st]] = sweeps
            batch.fluctuations[idx] = w
            batch.micro_phase[idx] = d
            info["iterations"][idx] = out["iterations"]
            for k, b in enumerate(idx):
                info["residual_histories"][b] = \
                    out["residual_histories"][k]
    return info


def homogenize_batch(ws: RveWorkspace, F, s, batch: RveBatch):
    """Volume-averaged stress, drive and energy of every cell."""
    has_phase = ws.mode == "micro_fracture"
    sys = _element_systems(ws, F, s, batch.fluctuations, batch.micro_phase,
                           has_phase, order=1)
    if sys["bad"] is not None:
        raise ConvergenceError("non-physical micro state in homogenization",
                               diagnostics={"cells": np.nonzero(sys['bad'])[0]})
    resp = sys["resp"]
    H = ws.volume_average(resp["H"])
    if has_phase:
        H = np.zeros(len(batch))
    return {"P": ws.volume_average(resp["P"]), "H": H,
            "psi": ws.volume_average(resp["psi"])}


def _condense_subset(ws, ops, F, s, w, d, hist, n_cols):
    """Averages and condensed sensitivities of one uniform sub-batch."""
    phys = ws.mode == "micro_fracture"
    sys = _element_systems(ws, F, s, w, d, phys, order=2,
                           mech_dofs=ops.has_mech,
                           phase_dofs=ops.has_phase)
    if sys["bad"] is not None:
        raise ConvergenceError("non-physical micro state in condensation")
    resp = sys["resp"]
    B = len(F)
    out = {"P": ws.volume_average(resp["P"]),
           "H": ws.volume_average(resp["H"]),
           "psi": ws.volume_average(resp["psi"])}
    if phys:
        # the macro drive channel is inert when fracture lives on the
        # micro scale; the pointwise drive belongs to the d equation
        out["H"] = np.zeros(B)

    mesh, ed = ws.mesh, ws.edata
    unit_F = _UNIT_F[:n_cols]                     # (m, 2, 2)
    dFt = np.broadcast_to(
        unit_F.transpose(1, 2, 0),
        (B, mesh.n_elems, 4, 2, 2, n_cols)).copy()
    if ws.mode == "macro_fracture" and n_cols == 5:
        ds_q = np.zeros((B, mesh.n_elems, 4, n_cols))
        ds_q[..., 4] = 1.0
    else:
        ds_q = np.zeros((B, mesh.n_elems, 4, n_cols))

    if ops.n_total > 0:
        M = ops.scatter_matrix(sys["K"])
        R = ops.scatter_vector(sys["r"])
        clamped = np.zeros(R.shape, dtype=bool)
        if ops.has_phase:
            off = ops.phase_offset
            clamped[:, off:] = _clamp_mask(d, hist, R[:, off:])
        _eliminate(M, clamped)
        G = sys["G"][..., :n_cols]                # (B, n_e, k, m)
        nek = mesh.n_elems * ops.k_local
        G2 = G.reshape(B, nek, n_cols).transpose(1, 0, 2).reshape(nek, -1)
        G_red = (ops.vec_op @ G2).reshape(ops.n_total, B, n_cols) \
            .transpose(1, 0, 2)
        G_red[clamped] = 0.0
        X = np.linalg.solve(M, -G_red)            # (B, nt, m)
        if ops.has_mech:
            w_sens = ops.expand_mech(X)           # (B, n_nodes, 2, m)
            dgrad = np.einsum('benim,eqnj->beqijm',
                              w_sens[:, mesh.elements], ed.grads)
            dFt = dFt + dgrad
        if ops.has_phase:
            d_sens = X[:, ops.phase_offset:, :]
            ds_q = ds_q + np.einsum('qn,benm->beqm', ed.shape_values,
                                    d_sens[:, mesh.elements])

    dP = (np.einsum('beqijkl,beqklm->beqijm', resp["C"], dFt)
          + np.einsum('beqij,beqm->beqijm', resp["D"], ds_q))
    dH = (np.einsum('beqkl,beqklm->beqm', resp["D"], dFt)
          + resp["Q"][..., None] * ds_q)
    dP_cols = ws.volume_average(dP)               # (B, 2, 2, m)
    dH_cols = ws.volume_average(dH)               # (B, m)
    out["dP_dF"] = dP_cols[..., :4].reshape(B, 2, 2, 2, 2)
    if n_cols == 5:
        out["dP_ds"] = dP_cols[..., 4]
        out["dH_dF"] = dH_cols[:, :4].reshape(B, 2, 2)
        out["dH_ds"] = dH_cols[:, 4]
    else:
        out["dP_ds"] = np.zeros((B, 2, 2))
        out["dH_dF"] = np.zeros((B, 2, 2))
        out["dH_ds"] = np.zeros(B)
    return out


def condensed_tangent_batch(ws: RveWorkspace, F, s, batch: RveBatch,
                            voigt_tangent: bool = False):
    """Averages plus condensed macro tangents of every cell.

    ``voigt_tangent`` skips the fluctuation-sensitivity solve and
    returns plain volume averages of the pointwise tangents (evaluated
    at the current, possibly fluctuating, state); it exists to expose
    the stiffness error of the Taylor tangent on fluctuating problems.
    """
    if batch.mode != ws.mode:
        raise ValueError("batch mode does not match workspace mode")
    has_phase = ws.mode == "micro_fracture"
    n_cols = 4 if has_phase else 5
    B = len(batch)
    out = {"P": np.zeros((B, 2, 2)), "H": np.zeros(B), "psi": np.zeros(B),
           "dP_dF": np.zeros((B, 2, 2, 2, 2)), "dP_ds": np.zeros((B, 2, 2)),
           "dH_dF": np.zeros((B, 2, 2)), "dH_ds": np.zeros(B)}
    for mask, has_mech in _group_masks(ws, batch):
        idx_all = np.nonzero(mask)[0]
        if len(idx_all) == 0:
            continue
        ops = ws.operators(has_mech and not voigt_tangent,
                           has_phase and not voigt_tangent)
        for lo in range(0, len(idx_all), ws.chunk_size):
            idx = idx_all[lo:lo + ws.chunk_size]
            sub = _condense_subset(
                ws, ops, F[idx], s[idx], batch.fluctuations[idx],
                batch.micro_phase[idx], batch.phase_history[idx], n_cols)
            for key, val in sub.items():
                out[key][idx] = val
    return out


def micro_dissipation_batch(ws: RveWorkspace, batch_old: RveBatch,
                            batch_new: RveBatch):
    """Volume-averaged micro fracture dissipation increment per cell.

    The crack-surface density is d^2/(2 l) + l/2 |grad d|^2 weighted by
    the cell-local critical energy; returns zero in macro-fracture mode
    where the micro phase is identically zero.
    """
    def density(batch):
        val, grad = ws.phase_at_gauss(batch.micro_phase)
        ll = ws.length_scale[None, :, None]
        gam = val ** 2 / (2.0 * ll) + 0.5 * ll * np.sum(grad ** 2, axis=-1)
        return ws.g_c[None, :, None] * gam

    incr = ws.volume_average(density(batch_new) - density(batch_old))
    floor = -1e-10 * max(1.0, float(ws.g_c.max()))
    if np.any(incr < floor):
        raise IrreversibilityError(
            f"micro crack energy decreased by {float(incr.min()):.3e}")
    return incr


# -- single-cell wrappers (batch of one) --------------------------------

def _as_batch(state: RveState) -> RveBatch:
    return RveBatch(state.fluctuations[None].copy(),
                    state.micro_phase[None].copy(),
                    state.phase_history[None].copy(),
                    np.array([state.frozen]), state.mode)


def solve_micro(F_macro, s_macro, state: RveState, ws: RveWorkspace,
                tol=None):
    """Equilibrate one cell; returns the new state and solver info."""
    batch = _as_batch(state)
    F = np.asarray(F_macro, dtype=float)[None]
    s = np.array([float(s_macro)])
    info = solve_micro_batch(ws, F, s, batch, tol=tol)
    info["residual_history"] = info.pop("residual_histories")[0]
    info["iterations"] = int(info["iterations"][0])
    return batch.state(0), info


def homogenize(state: RveState, F_macro, s_macro,
               ws: RveWorkspace) -> HomogenizedResponse:
    """Volume averages of one cell at its current state."""
    batch = _as_batch(state)
    out = homogenize_batch(ws, np.asarray(F_macro, dtype=float)[None],
                           np.array([float(s_macro)]), batch)
    return HomogenizedResponse(P=out["P"][0], H_macro=float(out["H"][0]),
                               psi=float(out["psi"][0]))


def condensed_tangent(state: RveState, F_macro, s_macro, ws: RveWorkspace,
                      voigt_tangent: bool = False) -> HomogenizedResponse:
    """Averages and condensed tangents of one converged cell."""
    batch = _as_batch(state)
    out = condensed_tangent_batch(
        ws, np.asarray(F_macro, dtype=float)[None],
        np.array([float(s_macro)]), batch, voigt_tangent=voigt_tangent)
    return HomogenizedResponse(
        P=out["P"][0], H_macro=float(out["H"][0]), psi=float(out["psi"][0]),
        dP_dF=out["dP_dF"][0], dP_ds=out["dP_ds"][0],
        dH_dF=out["dH_dF"][0], dH_ds=float(out["dH_ds"][0]))


def micro_dissipation(state_old: RveState, state_new: RveState,
                      ws: RveWorkspace) -> float:
    """Averaged micro dissipation increment between two cell states."""
    return float(micro_dissipation_batch(ws, _as_batch(state_old),
                                         _as_batch(state_new))[0])


def average_deformation_check(state: RveState, F_macro,
                              ws: RveWorkspace) -> float:
    """Normalized defect of the averaging relation <F_micro> = F_macro."""
    F = np.asarray(F_macro, dtype=float)[None]
    Ft = ws.micro_gradients(F, state.fluctuations[None])
    avg = ws.volume_average(Ft)[0]
    return float(np.linalg.norm(avg - F[0]) /
                 max(np.linalg.norm(F[0]), 1.0))


def hill_mandel_check(state: RveState, F_macro, s_macro, ws: RveWorkspace,
                      n_trials: int = 8, seed: int = 0) -> float:
    """Normalized worst-case violation of the two-scale power identity.

    For random macro-gradient variations the admissible micro variation
    follows from the converged sensitivity; the averaged micro virtual
    power must match the macro one.
    """
    batch = _as_batch(state)
    F = np.asarray(F_macro, dtype=float)[None]
    s = np.array([float(s_macro)])
    has_phase = ws.mode == "micro_fracture"
    has_mech = ws.bc != "voigt" and not state.frozen
    ops = ws.operators(has_mech, has_phase)

    sys = _element_systems(ws, F, s, batch.fluctuations, batch.micro_phase,
                           has_phase, order=2, mech_dofs=ops.has_mech,
                           phase_dofs=ops.has_phase)
    resp = sys["resp"]
    P_avg = ws.volume_average(resp["P"])[0]

    w_sens = None
    if ops.n_total > 0 and ops.has_mech:
        M = ops.scatter_matrix(sys["K"])
        R = ops.scatter_vector(sys["r"])
        clamped = np.zeros(R.shape, dtype=bool)
        if ops.has_phase:
            off = ops.phase_offset
            clamped[:, off:] = _clamp_mask(batch.micro_phase,
                                           batch.phase_history,
                                           R[:, off:])
        _eliminate(M, clamped)
        G = sys["G"][..., :4]
        nek = ws.mesh.n_elems * ops.k_local
        G2 = G.reshape(1, nek, 4).transpose(1, 0, 2).reshape(nek, 4)
        G_red = (ops.vec_op @ G2).reshape(ops.n_total, 1, 4) \
            .transpose(1, 0, 2)
        G_red[clamped] = 0.0
        X = np.linalg.solve(M, -G_red)
        w_sens = ops.expand_mech(X)[0]            # (n_nodes, 2, 4)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_trials):
        dF = rng.standard_normal((2, 2))
        if w_sens is not None:
            dw = w_sens @ dF.ravel()
            dFt = ws.micro_gradients(dF[None], dw[None])
        else:
            dFt = np.broadcast_to(dF, resp["P"].shape)
        lhs = ws.volume_average(np.einsum('beqij,beqij->beq',
                                          resp["P"], dFt))[0]
        rhs = np.einsum('ij,ij->', P_avg, dF)
        scale = max(np.linalg.norm(P_avg) * np.linalg.norm(dF), 1e-9)
        worst = max(worst, abs(lhs - rhs) / scale)
    return float(worst)
