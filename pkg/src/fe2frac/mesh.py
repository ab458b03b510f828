"""Structured quadrilateral meshes for the benchmark geometries.

All meshes are logically structured grids; ``grid_ids`` keeps the
(row, column) to node-id map so that neighbor queries (checkerboard
diagnostics, boundary extraction) stay trivial.  The notched square is
the only geometry with topology beyond the grid: the notch is a
horizontal seam of duplicated nodes from the left edge to the center,
so the two crack faces can separate while the tip node stays single.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fem


@dataclass
class Mesh:
    """Nodes, connectivity and named boundary sets of one mesh.

    Attributes
    ----------
    nodes : ndarray, shape (n_nodes, 2)
    elements : ndarray of int, shape (n_elems, 4)
        Counterclockwise corner numbering.
    region : ndarray of str, shape (n_elems,)
        Material region tag per element ("bulk", "matrix", "inclusion").
    boundary : dict of str to int ndarray
        Node sets of the named sides (seam duplicates included where a
        side crosses the notch).
    boundary_edges : dict of str to int ndarray, shape (k, 2)
        Node pairs of consecutive boundary edges per side, for traction
        integration.
    grid_shape : tuple of int
        (rows, cols) of the underlying node grid.
    grid_ids : ndarray of int, shape grid_shape
        Node id at each grid position; on the seam row these are the
        lower-face nodes.
    seam_pairs : ndarray of int, shape (k, 2)
        (lower, upper) node ids duplicated across the notch.
    """

    nodes: np.ndarray
    elements: np.ndarray
    region: np.ndarray
    boundary: dict
    boundary_edges: dict
    grid_shape: tuple
    grid_ids: np.ndarray
    seam_pairs: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 2), dtype=int))

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_elems(self):
        return len(self.elements)

    def validate(self):
        """Check element orientation via quadrature-point Jacobians."""
        fem.precompute_element_data(self.nodes, self.elements)
        return self


def _grid(coords_x, coords_y):
    """Tensor-product node grid; returns nodes, grid_ids, elements."""
    nx, ny = len(coords_x), len(coords_y)
    X, Y = np.meshgrid(coords_x, coords_y)       # (ny, nx)
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    grid_ids = np.arange(nx * ny).reshape(ny, nx)
    e00 = grid_ids[:-1, :-1].ravel()
    e10 = grid_ids[:-1, 1:].ravel()
    e11 = grid_ids[1:, 1:].ravel()
    e01 = grid_ids[1:, :-1].ravel()
    elements = np.column_stack([e00, e10, e11, e01])
    return nodes, grid_ids, elements


def _side_sets(grid_ids):
    boundary = {
        "bottom": grid_ids[0, :].copy(),
        "top": grid_ids[-1, :].copy(),
        "left": grid_ids[:, 0].copy(),
        "right": grid_ids[:, -1].copy(),
    }
    edges = {name: np.column_stack([ids[:-1], ids[1:]])
             for name, ids in boundary.items()}
    return boundary, edges


def build_notched_square(side: float, n_elems_per_side: int) -> Mesh:
    """Square plate with a horizontal edge notch at mid height.

    The notch runs from the left edge to the plate center and is
    realized by duplicating the nodes strictly left of the center on
    the mid line; elements above the seam reference the duplicates.
    ``n_elems_per_side`` must be even so the seam lies on a grid line
    and ends at a grid node.
    """
    n = n_elems_per_side
    if n < 2 or n % 2:
        raise ValueError("n_elems_per_side must be even and >= 2")
    h = side / n
    coords = np.arange(n + 1) * h
    nodes, grid_ids, elements = _grid(coords, coords)
    region = np.full(len(elements), "bulk", dtype="<U9")

    mid = n // 2
    seam_orig = grid_ids[mid, :mid]              # x < side/2 on y = side/2
    dup_start = len(nodes)
    dup_ids = np.arange(dup_start, dup_start + len(seam_orig))
    nodes = np.vstack([nodes, nodes[seam_orig]])
    remap = np.arange(len(nodes))
    remap[seam_orig] = dup_ids

    # elements whose lower edge lies on the seam switch to the duplicates
    elem_grid = np.arange(n * n).reshape(n, n)
    upper_row = elem_grid[mid, :mid]
    for e in upper_row:
        elements[e, 0] = remap[elements[e, 0]]
        elements[e, 1] = remap[elements[e, 1]]

    boundary, edges = _side_sets(grid_ids)
    # the duplicated left-edge node also lies on the left side
    boundary["left"] = np.sort(np.append(boundary["left"], dup_ids[0]))
    upper_left = np.nonzero(edges["left"][:, 0] == seam_orig[0])[0]
    edges["left"][upper_left, 0] = dup_ids[0]

    seam_pairs = np.column_stack([seam_orig, dup_ids])
    return Mesh(nodes=nodes, elements=elements, region=region,
                boundary=boundary, boundary_edges=edges,
                grid_shape=(n + 1, n + 1), grid_ids=grid_ids,
                seam_pairs=seam_pairs).validate()


def build_cooks_membrane(n_long: int, n_short: int) -> Mesh:
    """Tapered Cook panel, clamped edge at x = 0, loaded edge at x = 48.

    Corner coordinates (0, 0), (48, 44), (48, 60), (0, 44) scaled by 10
    to mm; bilinear transfinite interpolation of the boundary, n_long
    elements along the span and n_short across.
    """
    if n_long < 1 or n_short < 1:
        raise ValueError("element counts must be positive")
    corners = np.array([[0.0, 0.0], [480.0, 440.0],
                        [480.0, 600.0], [0.0, 440.0]])
    xi = np.linspace(0.0, 1.0, n_long + 1)
    eta = np.linspace(0.0, 1.0, n_short + 1)
    Xi, Eta = np.meshgrid(xi, eta)               # (rows=eta, cols=xi)
    pts = (np.multiply.outer((1 - Eta) * (1 - Xi), corners[0])
           + np.multiply.outer((1 - Eta) * Xi, corners[1])
           + np.multiply.outer(Eta * Xi, corners[2])
           + np.multiply.outer(Eta * (1 - Xi), corners[3]))
    nodes = pts.reshape(-1, 2)
    grid_ids = np.arange(nodes.shape[0]).reshape(n_short + 1, n_long + 1)
    e00 = grid_ids[:-1, :-1].ravel()
    e10 = grid_ids[:-1, 1:].ravel()
    e11 = grid_ids[1:, 1:].ravel()
    e01 = grid_ids[1:, :-1].ravel()
    elements = np.column_stack([e00, e10, e11, e01])
    region = np.full(len(elements), "bulk", dtype="<U9")
    boundary, edges = _side_sets(grid_ids)
    return Mesh(nodes=nodes, elements=elements, region=region,
                boundary=boundary, boundary_edges=edges,
                grid_shape=(n_short + 1, n_long + 1),
                grid_ids=grid_ids).validate()


def build_rve(side: float, n_elems_per_side: int,
              inclusion_radius: float) -> Mesh:
    """Square unit cell centered at the origin with a circular inclusion.

    Elements whose centroid lies inside the radius are tagged
    "inclusion", the rest "matrix".  The inclusion element set must be
    nonempty and edge-connected, which is checked for n >= 4.
    """
    if not 0.0 < inclusion_radius < side / 2.0:
        raise ValueError("inclusion_radius must lie in (0, side/2)")
    n = n_elems_per_side
    if n < 2:
        raise ValueError("n_elems_per_side must be >= 2")
    coords = np.linspace(-side / 2.0, side / 2.0, n + 1)
    nodes, grid_ids, elements = _grid(coords, coords)
    centroids = nodes[elements].mean(axis=1)
    inside = np.hypot(centroids[:, 0], centroids[:, 1]) <= inclusion_radius
    if not inside.any():
        raise ValueError("inclusion_radius captures no element centroid")
    region = np.where(inside, "inclusion", "matrix").astype("<U9")
    if n >= 4 and not _connected(inside.reshape(n, n)):
        raise ValueError("inclusion element set is not edge-connected")
    boundary, edges = _side_sets(grid_ids)
    return Mesh(nodes=nodes, elements=elements, region=region,
                boundary=boundary, boundary_edges=edges,
                grid_shape=(n + 1, n + 1), grid_ids=grid_ids).validate()


def _connected(mask):
    """Edge connectivity of True cells in a 2D boolean grid."""
    total = int(mask.sum())
    start = np.argwhere(mask)[0]
    seen = np.zeros_like(mask)
    stack = [tuple(start)]
    seen[tuple(start)] = True
    count = 0
    while stack:
        i, j = stack.pop()
        count += 1
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            a, b = i + di, j + dj
            if 0 <= a < mask.shape[0] and 0 <= b < mask.shape[1] \
                    and mask[a, b] and not seen[a, b]:
                seen[a, b] = True
                stack.append((a, b))
    return count == total


def material_tags(mesh: Mesh):
    """Distinct region tags in deterministic order."""
    return sorted(set(mesh.region.tolist()))
