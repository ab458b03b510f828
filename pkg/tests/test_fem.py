"""Quadrilateral FEM core: shapes, quadrature, dof maps, assembly."""
import numpy as np
import pytest

from fe2frac import fem
from fe2frac.errors import SingularSystemError
from fe2frac.mesh import build_rve


def test_shape_partition_of_unity():
    rng = np.random.default_rng(3)
    xi = rng.uniform(-1, 1, size=(40, 2))
    vals, grads = fem.shape_eval(xi)
    assert np.abs(vals.sum(axis=-1) - 1.0).max() < 1e-15
    assert np.abs(grads.sum(axis=-2)).max() < 1e-15


def test_shape_corner_delta():
    corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
    vals, _ = fem.shape_eval(corners)
    assert np.abs(vals - np.eye(4)).max() < 1e-15


def test_gauss_rule_integrates_bilinear_exactly():
    quad = fem.gauss_2x2()
    x, y = quad.points[:, 0], quad.points[:, 1]
    # monomials up to degree 3 per direction are exact on the square
    for p in range(4):
        for q in range(4):
            exact = (0.0 if p % 2 or q % 2
                     else 4.0 / ((p + 1) * (q + 1)))
            got = np.sum(quad.weights * x ** p * y ** q)
            assert got == pytest.approx(exact, abs=1e-15)


def test_element_data_measures_distorted_quad():
    nodes = np.array([[0.0, 0.0], [2.0, 0.2], [1.8, 1.5], [-0.1, 1.1]])
    elements = np.array([[0, 1, 2, 3]])
    ed = fem.precompute_element_data(nodes, elements)
    x, y = nodes[:, 0], nodes[:, 1]
    area = 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    assert ed.detJw.sum() == pytest.approx(area, rel=1e-14)


def test_element_data_gradients_reproduce_linear_field():
    m = build_rve(3.0, 4, 0.8)
    ed = fem.precompute_element_data(m.nodes, m.elements)
    a, b = 0.7, -1.3
    field = a * m.nodes[:, 0] + b * m.nodes[:, 1]
    gf = np.einsum('eqai,ea->eqi', ed.grads, field[m.elements])
    assert np.abs(gf[..., 0] - a).max() < 1e-13
    assert np.abs(gf[..., 1] - b).max() < 1e-13


def test_element_data_rejects_nonpositive_jacobian():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        fem.precompute_element_data(nodes, np.array([[0, 3, 2, 1]]))


def test_dofmap_reduction_counts():
    dm = fem.DofMap(5, 2, fixed=np.array([0, 1, 8]))
    assert dm.n_full == 10
    assert dm.n_reduced == 7
    assert dm.fixed_mask.sum() == 3


def test_dofmap_pairs_share_reduced_dof():
    dm = fem.DofMap(4, 1, pairs=np.array([[3, 0]]))
    assert dm.n_reduced == 3
    assert dm.reduced_index[3] == dm.reduced_index[0]
    full = dm.expand(np.array([5.0, 6.0, 7.0]))
    assert full[3] == full[0]


def test_dofmap_slave_of_fixed_master():
    dm = fem.DofMap(4, 1, fixed=np.array([0]), fixed_values=np.array([2.5]),
                    pairs=np.array([[3, 0]]))
    assert dm.fixed_mask[3]
    f = np.zeros(4)
    dm.apply_values(f)
    assert f[0] == 2.5 and f[3] == 2.5
    assert dm.n_reduced == 2


def test_dofmap_rejects_chained_pairs():
    with pytest.raises(ValueError):
        fem.DofMap(4, 1, pairs=np.array([[1, 2], [2, 3]]))


def test_dofmap_set_fixed_values_guard():
    dm = fem.DofMap(3, 1, fixed=np.array([1]))
    dm.set_fixed_values(np.array([1]), np.array([4.0]))
    assert dm.fixed_values_full[1] == 4.0
    with pytest.raises(ValueError):
        dm.set_fixed_values(np.array([0]), np.array([1.0]))


def test_element_dofs_interleaving():
    dm = fem.DofMap(6, 2)
    dofs = dm.element_dofs(np.array([[0, 2, 3, 1]]))
    assert dofs.tolist() == [[0, 1, 4, 5, 6, 7, 2, 3]]


def laplace_kernel(ed):
    K = np.einsum('eqai,eqbi,eq->eab', ed.grads, ed.grads, ed.detJw)

    def kernel(e):
        return np.zeros(4), K[e]

    return kernel


def test_assemble_solves_linear_dirichlet_problem():
    # bilinear elements carry linear fields exactly, so a harmonic
    # linear function prescribed on the boundary is reproduced inside
    m = build_rve(2.0, 5, 0.5)
    ed = fem.precompute_element_data(m.nodes, m.elements)
    bnodes = np.unique(np.concatenate(list(m.boundary.values())))
    exact = 0.8 * m.nodes[:, 0] - 0.3 * m.nodes[:, 1] + 0.1
    dm = fem.DofMap(m.n_nodes, 1, fixed=bnodes,
                    fixed_values=exact[bnodes])
    sys = fem.assemble(m.nodes, m.elements, dm, laplace_kernel(ed))
    # residual convention: assemble returns rhs = -(r + K u_fix)
    sol = sys.solve()
    assert np.abs(sol - exact).max() < 1e-12


def test_assemble_periodic_pairs_respected():
    m = build_rve(2.0, 4, 0.5)
    ed = fem.precompute_element_data(m.nodes, m.elements)
    g = m.grid_ids
    corners = np.array([g[0, 0], g[0, -1], g[-1, -1], g[-1, 0]])
    slaves = np.concatenate([g[1:-1, -1], g[-1, 1:-1]])
    masters = np.concatenate([g[1:-1, 0], g[0, 1:-1]])
    dm = fem.DofMap(m.n_nodes, 1, fixed=corners,
                    pairs=np.column_stack([slaves, masters]))
    rng = np.random.default_rng(11)

    def kernel(e):
        K = np.einsum('qai,qbi,q->ab', ed.grads[e], ed.grads[e], ed.detJw[e])
        return rng.standard_normal(4), K

    sol = fem.assemble(m.nodes, m.elements, dm, kernel).solve()
    assert np.abs(sol[slaves] - sol[masters]).max() == 0.0
    assert np.abs(sol[corners]).max() == 0.0


def test_solve_reports_singular_system():
    # pure Neumann Laplacian has the constant null space
    m = build_rve(2.0, 3, 0.5)
    ed = fem.precompute_element_data(m.nodes, m.elements)
    dm = fem.DofMap(m.n_nodes, 1)
    sys = fem.assemble(m.nodes, m.elements, dm, laplace_kernel(ed))
    sys.rhs[:] = 1.0
    with pytest.raises(SingularSystemError) as err:
        sys.solve()
    assert "condition" in str(err.value)


def test_scatter_coo_accumulates_duplicates():
    vals = np.ones((2, 2, 2))
    rows = np.array([[0, 1], [1, 2]])
    A = fem.scatter_coo(vals, rows, rows, (3, 3)).toarray()
    assert A[1, 1] == 2.0
    assert A.sum() == 8.0


def test_boundary_force_total_and_shares():
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
    edges = np.array([[0, 1], [1, 2]])
    f = fem.boundary_force_vector(nodes, edges, (2.0, -1.0), 3)
    fx, fy = f[0::2], f[1::2]
    assert fx.sum() == pytest.approx(2.0 * 3.0)
    assert fy.sum() == pytest.approx(-1.0 * 3.0)
    # interior node takes half of both adjacent edges
    assert fx[1] == pytest.approx(0.5 * 1.0 * 2.0 + 0.5 * 2.0 * 2.0)
    assert fx[0] == pytest.approx(0.5 * 1.0 * 2.0)


def test_boundary_force_empty_edges():
    f = fem.boundary_force_vector(np.zeros((2, 2)), np.zeros((0, 2), int),
                                  (1.0, 1.0), 2)
    assert np.all(f == 0.0)
