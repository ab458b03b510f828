"""Bilinear quadrilateral discretization and constrained assembly.

Elements are 4-node quads with counterclockwise local numbering and a
2x2 Gauss rule.  Fields live on nodes; vector fields interleave their
components, so the global dof of component c at node n is 2 n + c.

Constraints are handled by a reduction map: prescribed dofs are
eliminated, periodic pairs are folded onto their master dof, and the
remaining dofs are numbered consecutively.  The sparse selection matrix
S of shape (full, reduced) performs both the residual reduction (S^T r)
and the increment expansion (S d).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SingularSystemError

# Parent-domain corner coordinates, counterclockwise.
_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


@dataclass
class QuadratureRule:
    """Integration points and weights on the parent square [-1, 1]^2."""

    points: np.ndarray
    weights: np.ndarray


def gauss_2x2() -> QuadratureRule:
    """Standard 2x2 Gauss rule; point order follows the corner order."""
    a = 1.0 / np.sqrt(3.0)
    return QuadratureRule(points=a * _CORNERS.copy(),
                          weights=np.ones(4))


def shape_eval(xi):
    """Bilinear shape functions and parent-domain gradients.

    Parameters
    ----------
    xi : ndarray, shape (..., 2)

    Returns
    -------
    values : ndarray, shape (..., 4)
    grads : ndarray, shape (..., 4, 2)
    """
    xi = np.asarray(xi, dtype=float)
    x, y = xi[..., 0, None], xi[..., 1, None]
    cx, cy = _CORNERS[:, 0], _CORNERS[:, 1]
    values = 0.25 * (1.0 + cx * x) * (1.0 + cy * y)
    grads = np.empty(xi.shape[:-1] + (4, 2))
    grads[..., 0] = 0.25 * cx * (1.0 + cy * y)
    grads[..., 1] = 0.25 * cy * (1.0 + cx * x)
    return values, grads


@dataclass
class ElementData:
    """Per-element quantities precomputed for repeated assembly.

    Attributes
    ----------
    shape_values : ndarray, shape (q, 4)
    grads : ndarray, shape (n_elems, q, 4, 2)
        Physical shape gradients at each quadrature point.
    detJw : ndarray, shape (n_elems, q)
        Jacobian determinant times quadrature weight.
    """

    shape_values: np.ndarray
    grads: np.ndarray
    detJw: np.ndarray
    quad: QuadratureRule


def precompute_element_data(nodes, elements,
                            quad: QuadratureRule | None = None) -> ElementData:
    """Evaluate shape data on all elements; Jacobians must be positive."""
    quad = quad or gauss_2x2()
    values, pgrads = shape_eval(quad.points)          # (q,4), (q,4,2)
    X = nodes[elements]                               # (n_e, 4, 2)
    # J[e,q,i,j] = d x_i / d xi_j
    J = np.einsum('eai,qaj->eqij', X, pgrads)
    detJ = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    if np.any(detJ <= 0.0):
        raise ValueError("non-positive element Jacobian encountered")
    Jinv = np.empty_like(J)
    Jinv[..., 0, 0] = J[..., 1, 1]
    Jinv[..., 1, 1] = J[..., 0, 0]
    Jinv[..., 0, 1] = -J[..., 0, 1]
    Jinv[..., 1, 0] = -J[..., 1, 0]
    Jinv /= detJ[..., None, None]
    grads = np.einsum('qaj,eqji->eqai', pgrads, Jinv)
    return ElementData(shape_values=values, grads=grads,
                       detJw=detJ * quad.weights, quad=quad)


class DofMap:
    """Reduction map for one nodal field under Dirichlet and pairing
    constraints.

    Parameters
    ----------
    n_nodes : int
    ncomp : int
        Components per node (1 for scalar fields, 2 for displacements).
    fixed : ndarray of int, optional
        Full dof indices with prescribed values.
    fixed_values : ndarray, optional
        Values belonging to ``fixed`` (default zero).
    pairs : ndarray of int, shape (k, 2), optional
        (slave, master) dof pairs; the slave mirrors the master.  A
        slave whose master is fixed becomes fixed itself.
    """

    def __init__(self, n_nodes: int, ncomp: int, fixed=None,
                 fixed_values=None, pairs=None):
        self.n_nodes = n_nodes
        self.ncomp = ncomp
        n_full = n_nodes * ncomp
        self.n_full = n_full

        master = np.arange(n_full)
        if pairs is not None and len(pairs):
            pairs = np.asarray(pairs, dtype=int)
            master[pairs[:, 0]] = pairs[:, 1]
            if np.any(master[master] != master):
                raise ValueError("chained dof pairs are not supported")
        self._master = master

        self.fixed_values_full = np.zeros(n_full)
        fixed_mask = np.zeros(n_full, dtype=bool)
        if fixed is not None and len(fixed):
            fixed = np.asarray(fixed, dtype=int)
            fixed_mask[fixed] = True
            if fixed_values is not None:
                self.fixed_values_full[fixed] = fixed_values
        # slaves of fixed masters are fixed with the master's value
        slave_of_fixed = fixed_mask[master] & ~fixed_mask
        fixed_mask |= slave_of_fixed
        self.fixed_values_full[slave_of_fixed] = \
            self.fixed_values_full[master[slave_of_fixed]]
        self.fixed_mask = fixed_mask

        free_root = ~fixed_mask & (master == np.arange(n_full))
        self.n_reduced = int(np.count_nonzero(free_root))
        reduced = np.full(n_full, -1, dtype=int)
        reduced[free_root] = np.arange(self.n_reduced)
        reduced[~fixed_mask] = reduced[master[~fixed_mask]]
        self.reduced_index = reduced

        rows = np.nonzero(reduced >= 0)[0]
        self.selection = sp.csr_matrix(
            (np.ones(len(rows)), (rows, reduced[rows])),
            shape=(n_full, self.n_reduced))

    def set_fixed_values(self, fixed_dofs, values):
        """Update prescribed values (load stepping) without renumbering."""
        fixed_dofs = np.asarray(fixed_dofs, dtype=int)
        if not np.all(self.fixed_mask[fixed_dofs]):
            raise ValueError("dof not marked as prescribed")
        self.fixed_values_full[fixed_dofs] = values

    def reduce_vector(self, full):
        return self.selection.T @ full

    def expand(self, reduced):
        """Reduced increment to full field; prescribed entries zero."""
        return self.selection @ reduced

    def apply_values(self, full_field):
        """Impose prescribed values and pairing on a full field, in place."""
        full_field[self.fixed_mask] = self.fixed_values_full[self.fixed_mask]
        full_field[:] = full_field[self._master]
        return full_field

    def element_dofs(self, elements):
        """Full dof indices per element, components interleaved."""
        n_e, k = elements.shape
        dofs = (elements[:, :, None] * self.ncomp
                + np.arange(self.ncomp)[None, None, :])
        return dofs.reshape(n_e, k * self.ncomp)


@dataclass
class SparseSystem:
    """Reduced linear system K u = f with its reduction map."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    dofmap: DofMap

    def solve(self):
        """Solve and expand to the full field, prescribed values included.

        Raises
        ------
        SingularSystemError
            If factorization fails or produces non-finite values; the
            message carries a condition estimate of the reduced matrix.
        """
        if self.dofmap.n_reduced == 0:
            return self.dofmap.fixed_values_full.copy()
        try:
            u_red = spla.spsolve(self.matrix.tocsc(), self.rhs)
        except RuntimeError as exc:
            raise SingularSystemError(
                f"factorization failed: {exc}") from exc
        if not np.all(np.isfinite(u_red)):
            cond = _condition_estimate(self.matrix)
            raise SingularSystemError(
                f"singular constrained system (1-norm condition estimate "
                f"{cond:.3e})")
        # LU is backward stable, so near-singularity shows up as a huge
        # solution, not a huge residual: ||u|| ||K|| / ||f|| bounds the
        # condition number from below
        fn = np.abs(self.rhs).max()
        kn = np.abs(self.matrix).sum(axis=1).max()
        if fn > 0.0 and np.abs(u_red).max() * kn > 1e14 * fn:
            cond = _condition_estimate(self.matrix)
            raise SingularSystemError(
                f"singular constrained system (1-norm condition estimate "
                f"{cond:.3e})")
        full = self.dofmap.expand(u_red)
        full[self.dofmap.fixed_mask] = \
            self.dofmap.fixed_values_full[self.dofmap.fixed_mask]
        return full


def _condition_estimate(matrix):
    try:
        n = matrix.shape[0]
        if n <= 600:
            return np.linalg.cond(matrix.toarray(), 1)
        est = spla.onenormest(matrix)
        return est * spla.onenormest(spla.inv(matrix.tocsc()))
    except Exception:
        return np.inf


def scatter_coo(values, rows_dofs, cols_dofs, shape):
    """COO matrix from stacked local blocks.

    values : (n_e, a, b); rows_dofs : (n_e, a); cols_dofs : (n_e, b).
    """
    n_e, a, b = values.shape
    rows = np.repeat(rows_dofs[:, :, None], b, axis=2)
    cols = np.repeat(cols_dofs[:, None, :], a, axis=1)
    return sp.coo_matrix(
        (values.ravel(), (rows.ravel(), cols.ravel())), shape=shape)


def assemble(nodes, elements, dofmap: DofMap, element_kernel) -> SparseSystem:
    """Assemble a constrained linear system from an element kernel.

    ``element_kernel(e)`` returns the local right-hand side and matrix
    of element ``e`` in local dof order (components interleaved).  The
    reduced system has Dirichlet rows and columns eliminated; their
    prescribed values are lifted onto the right-hand side.
    """
    n_e = len(elements)
    edofs = dofmap.element_dofs(elements)
    k = edofs.shape[1]
    r_all = np.zeros((n_e, k))
    K_all = np.zeros((n_e, k, k))
    for e in range(n_e):
        r_all[e], K_all[e] = element_kernel(e)

    n = dofmap.n_full
    K_full = scatter_coo(K_all, edofs, edofs, (n, n)).tocsr()
    r_full = np.zeros(n)
    np.add.at(r_full, edofs.ravel(), r_all.ravel())

    S = dofmap.selection
    lift = K_full @ dofmap.fixed_values_full
    matrix = (S.T @ K_full @ S).tocsr()
    rhs = S.T @ (r_full - lift)
    return SparseSystem(matrix=matrix, rhs=rhs, dofmap=dofmap)


def boundary_force_vector(nodes, edges, traction, n_nodes):
    """Consistent nodal forces of a constant traction on boundary edges.

    ``edges`` is an (k, 2) array of node pairs; the traction is constant
    per unit reference length, so each edge contributes half its length
    to both nodes (exact for linear edge shape functions).
    """
    f = np.zeros(n_nodes * 2)
    if len(edges) == 0:
        return f
    length = np.linalg.norm(nodes[edges[:, 1]] - nodes[edges[:, 0]], axis=1)
    t = np.asarray(traction, dtype=float)
    for c in range(2):
        np.add.at(f, edges[:, 0] * 2 + c, 0.5 * length * t[c])
        np.add.at(f, edges[:, 1] * 2 + c, 0.5 * length * t[c])
    return f
