"""Bilinear finite elements on the fine grid with cell-wise constant coefficients."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Mapping, Union

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError
from .linalg import SPDSolver, finalize
from .mesh import CORNER_OFFSETS, SIDES, GridHierarchy, StructuredGrid, patch_node_ids

BoundaryValue = Union[float, Callable[[np.ndarray, np.ndarray], np.ndarray]]

_S1 = np.array([[1.0, -1.0], [-1.0, 1.0]])
_M1 = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0


@lru_cache(maxsize=32)
def element_stiffness(hx: float, hy: float) -> np.ndarray:
    """4x4 stiffness of a bilinear hx-by-hy cell with unit coefficient (SW, SE, NW, NE)."""
    K = (hy / hx) * np.kron(_M1, _S1) + (hx / hy) * np.kron(_S1, _M1)
    K.setflags(write=False)
    return K


@lru_cache(maxsize=32)
def element_mass(hx: float, hy: float) -> np.ndarray:
    M = hx * hy * np.kron(_M1, _M1)
    M.setflags(write=False)
    return M


def check_coefficient(grid: StructuredGrid, coeff) -> np.ndarray:
    c = np.asarray(coeff, dtype=float).ravel()
    if c.size != grid.n_cells:
        raise ConfigurationError(f"coefficient has {c.size} values, grid has {grid.n_cells} cells")
    if not np.all(np.isfinite(c)) or np.any(c <= 0):
        raise ConfigurationError("coefficient must be finite and strictly positive")
    return c


def _assemble(cell_nodes, values, local, n) -> sp.csr_matrix:
    rows = np.repeat(cell_nodes, 4, axis=1).ravel()
    cols = np.tile(cell_nodes, (1, 4)).ravel()
    data = (values[:, None, None] * local[None]).ravel()
    return finalize(sp.coo_matrix((data, (rows, cols)), shape=(n, n)))


def patch_cell_nodes(mx: int, my: int) -> np.ndarray:
    """Local SW, SE, NW, NE node indices of the cells of an mx-by-my patch."""
    j, i = np.divmod(np.arange(mx * my), mx)
    sw = j * (mx + 1) + i
    return np.column_stack([sw, sw + 1, sw + mx + 1, sw + mx + 2])


def patch_stiffness(coef2d: np.ndarray, hx: float, hy: float) -> sp.csr_matrix:
    """Stiffness over a rectangular block of cells; ``coef2d`` has shape (my, mx)."""
    my, mx = coef2d.shape
    return _assemble(patch_cell_nodes(mx, my), coef2d.ravel(), element_stiffness(hx, hy), (mx + 1) * (my + 1))


def patch_mass(coef2d: np.ndarray, hx: float, hy: float) -> sp.csr_matrix:
    my, mx = coef2d.shape
    return _assemble(patch_cell_nodes(mx, my), coef2d.ravel(), element_mass(hx, hy), (mx + 1) * (my + 1))


def assemble_stiffness(grid: StructuredGrid, coeff) -> sp.csr_matrix:
    """Global stiffness matrix of a(u, v) = int coeff grad u . grad v."""
    c = check_coefficient(grid, coeff)
    return _assemble(grid.cell_nodes, c, element_stiffness(grid.hx, grid.hy), grid.n_nodes)


def assemble_mass(grid: StructuredGrid, weight) -> sp.csr_matrix:
    w = np.asarray(weight, dtype=float).ravel()
    return _assemble(grid.cell_nodes, w, element_mass(grid.hx, grid.hy), grid.n_nodes)


def _eval(value: BoundaryValue, xy: np.ndarray) -> np.ndarray:
    if callable(value):
        return np.broadcast_to(np.asarray(value(xy[:, 0], xy[:, 1]), dtype=float), (len(xy),)).copy()
    return np.full(len(xy), float(value))


@dataclass(frozen=True)
class BoundaryConditions:
    """Dirichlet and Neumann data per domain side.

    Values are constants or callables ``f(x, y)``.  ``neumann`` gives the
    outward flux density g_N = -coeff grad p . n.  Nodes shared by a Dirichlet
    and a Neumann side are Dirichlet nodes.
    """

    dirichlet: Mapping[str, BoundaryValue]
    neumann: Mapping[str, BoundaryValue] = field(default_factory=dict)

    def __post_init__(self):
        d, n = set(self.dirichlet), set(self.neumann)
        unknown = (d | n) - set(SIDES)
        if unknown:
            raise ConfigurationError(f"unknown boundary sides {sorted(unknown)}")
        if d & n:
            raise ConfigurationError(f"sides {sorted(d & n)} are both Dirichlet and Neumann")
        if d | n != set(SIDES):
            raise ConfigurationError(f"sides {sorted(set(SIDES) - d - n)} have no boundary condition")
        if not d:
            raise ConfigurationError("at least one Dirichlet side is required")

    @classmethod
    def left_right_drive(cls, p_left: float = 1.0, p_right: float = 0.0, g_n: float = 0.0):
        """Pressure drop from left to right, no-flow (or given flux) top and bottom."""
        return cls(dirichlet={"left": p_left, "right": p_right}, neumann={"bottom": g_n, "top": g_n})

    def dirichlet_nodes(self, grid: StructuredGrid) -> tuple:
        """Sorted Dirichlet node ids and their prescribed values."""
        vals = {}
        for side in SIDES:
            if side in self.dirichlet:
                nodes = grid.side_nodes(side)
                v = _eval(self.dirichlet[side], grid.node_coords[nodes])
                for n, x in zip(nodes.tolist(), v.tolist()):
                    vals.setdefault(n, x)
        nodes = np.array(sorted(vals), dtype=np.int64)
        return nodes, np.array([vals[n] for n in nodes.tolist()])

    def dirichlet_mask(self, grid: StructuredGrid) -> np.ndarray:
        m = np.zeros(grid.n_nodes, bool)
        m[self.dirichlet_nodes(grid)[0]] = True
        return m

    def edge_is_dirichlet(self, grid: StructuredGrid) -> np.ndarray:
        return np.isin(grid.boundary_edges.side, list(self.dirichlet))

    def neumann_edge_flux(self, grid: StructuredGrid) -> np.ndarray:
        """Integral of g_N over every boundary edge (zero on Dirichlet edges), trapezoid rule."""
        be = grid.boundary_edges
        out = np.zeros(len(be))
        for side, value in self.neumann.items():
            idx = np.flatnonzero(be.side == side)
            g = [_eval(value, grid.node_coords[be.nodes[idx, a]]) for a in (0, 1)]
            out[idx] = 0.5 * be.length[idx] * (g[0] + g[1])
        return out

    def neumann_nodal(self, grid: StructuredGrid) -> np.ndarray:
        """Nodal vector of <g_N, v> with edge-wise trapezoidal quadrature."""
        be = grid.boundary_edges
        out = np.zeros(grid.n_nodes)
        for side, value in self.neumann.items():
            idx = np.flatnonzero(be.side == side)
            for a in (0, 1):
                nodes = be.nodes[idx, a]
                np.add.at(out, nodes, 0.5 * be.length[idx] * _eval(value, grid.node_coords[nodes]))
        return out


def source_nodal(grid: StructuredGrid, q) -> np.ndarray:
    """Nodal vector of F(v) = int q v for cell-wise constant q."""
    out = np.zeros(grid.n_nodes)
    if q is None:
        return out
    qc = np.broadcast_to(np.asarray(q, dtype=float).ravel(), (grid.n_cells,))
    np.add.at(out, grid.cell_nodes.ravel(), np.repeat(qc * grid.cell_area / 4.0, 4))
    return out


def assemble_load(grid: StructuredGrid, q, bc: BoundaryConditions) -> np.ndarray:
    """Nodal vector of F(v) - <g_N, v>."""
    return source_nodal(grid, q) - bc.neumann_nodal(grid)


def apply_dirichlet_lifting(matrix, rhs, bc: BoundaryConditions, grid: StructuredGrid):
    """Eliminate Dirichlet unknowns.

    Returns ``(A_ff, b_f, lifting, free)`` where ``lifting`` is the nodal
    interpolant of p_D on the Dirichlet nodes (zero elsewhere) and ``free``
    holds the indices of the remaining unknowns.
    """
    nodes, values = bc.dirichlet_nodes(grid)
    if len(nodes) == 0:
        raise ConfigurationError("empty Dirichlet boundary")
    lifting = np.zeros(grid.n_nodes)
    lifting[nodes] = values
    free = np.setdiff1d(np.arange(grid.n_nodes), nodes)
    A = sp.csr_matrix(matrix)
    b = np.asarray(rhs, dtype=float) - A @ lifting
    return A[free][:, free], b[free], lifting, free


@dataclass
class PressureSystem:
    """Assembled fine-scale pressure problem for one coefficient."""

    grid: StructuredGrid
    coeff: np.ndarray
    q: np.ndarray
    bc: BoundaryConditions
    A: sp.csr_matrix
    load: np.ndarray  # F(v) - <g_N, v>
    dirichlet_nodes: np.ndarray
    dirichlet_values: np.ndarray

    @property
    def lifting(self) -> np.ndarray:
        x = np.zeros(self.grid.n_nodes)
        x[self.dirichlet_nodes] = self.dirichlet_values
        return x

    @property
    def free(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.grid.n_nodes), self.dirichlet_nodes)

    def energy(self, v) -> float:
        return float(v @ (self.A @ v))


def assemble_system(grid: StructuredGrid, coeff, q, bc: BoundaryConditions) -> PressureSystem:
    c = check_coefficient(grid, coeff)
    qc = np.zeros(grid.n_cells) if q is None else np.broadcast_to(np.asarray(q, float).ravel(), (grid.n_cells,)).copy()
    nodes, values = bc.dirichlet_nodes(grid)
    return PressureSystem(
        grid=grid,
        coeff=c,
        q=qc,
        bc=bc,
        A=assemble_stiffness(grid, c),
        load=assemble_load(grid, qc, bc),
        dirichlet_nodes=nodes,
        dirichlet_values=values,
    )


def solve_system(system: PressureSystem, tol: float = 1e-10) -> np.ndarray:
    A_ff, b_f, lifting, free = apply_dirichlet_lifting(system.A, system.load, system.bc, system.grid)
    p = lifting
    p[free] = SPDSolver(A_ff, tol).solve(b_f)
    return p


def solve_fine(grid: StructuredGrid, coeff, q, bc: BoundaryConditions, tol: float = 1e-10) -> np.ndarray:
    """Reference fine-grid pressure p_h."""
    return solve_system(assemble_system(grid, coeff, q, bc), tol)


@dataclass(frozen=True)
class PartitionOfUnity:
    """Multiscale hat functions, one column per coarse node (n_fine_nodes x n_coarse_nodes)."""

    chi: sp.csc_matrix

    def values(self, i: int) -> np.ndarray:
        return self.chi[:, i].toarray().ravel()

    @property
    def n(self) -> int:
        return self.chi.shape[1]


def _bilinear_hat_trace(mx: int, my: int, corner: int) -> np.ndarray:
    """Values on the (mx+1) x (my+1) node patch of the bilinear hat of one patch corner."""
    di, dj = CORNER_OFFSETS[corner]
    sx = np.linspace(0.0, 1.0, mx + 1)
    sy = np.linspace(0.0, 1.0, my + 1)
    fx = sx if di else 1.0 - sx
    fy = sy if dj else 1.0 - sy
    return np.outer(fy, fx).ravel()


def build_partition_of_unity(hierarchy: GridHierarchy, coeff) -> PartitionOfUnity:
    """coeff-harmonic extensions of bilinear hat traces on every coarse element."""
    fine, coarse = hierarchy.fine, hierarchy.coarse
    c = check_coefficient(fine, coeff).reshape(fine.ny, fine.nx)
    rx, ry = coarse.rx, coarse.ry
    n_loc = (rx + 1) * (ry + 1)
    bnd = np.zeros(n_loc, bool)
    li, lj = np.arange(n_loc) % (rx + 1), np.arange(n_loc) // (rx + 1)
    bnd[(li == 0) | (li == rx) | (lj == 0) | (lj == ry)] = True
    inner = np.flatnonzero(~bnd)
    traces = np.column_stack([_bilinear_hat_trace(rx, ry, k) for k in range(4)])

    rows, cols, vals = [], [], []
    corner_nodes = coarse.cell_nodes
    for e, (I, J) in enumerate(coarse.cell_ij):
        i0, j0 = I * rx, J * ry
        local = traces.copy()
        if len(inner):
            K = patch_stiffness(c[j0:j0 + ry, i0:i0 + rx], fine.hx, fine.hy)
            solver = SPDSolver(K[inner][:, inner])
            local[inner] = solver.solve(-(K[inner][:, np.flatnonzero(bnd)] @ traces[bnd]))
        nodes = patch_node_ids(fine, i0, i0 + rx, j0, j0 + ry)
        for k in range(4):
            rows.append(nodes)
            cols.append(np.full(n_loc, corner_nodes[e, k]))
            vals.append(local[:, k])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    # elements sharing an edge carry identical trace values there; keep one copy
    key = rows * coarse.n_nodes + cols
    _, first = np.unique(key, return_index=True)
    keep = first[np.abs(vals[first]) > 0]
    chi = sp.csc_matrix((vals[keep], (rows[keep], cols[keep])), shape=(fine.n_nodes, coarse.n_nodes))
    chi.sort_indices()
    return PartitionOfUnity(chi=chi)


def cell_gradients(grid: StructuredGrid) -> tuple:
    """Sparse operators giving d/dx and d/dy of a nodal field at cell midpoints."""
    cn = grid.cell_nodes
    n = grid.n_cells
    r = np.repeat(np.arange(n), 4)
    gx = np.array([-1.0, 1.0, -1.0, 1.0]) / (2 * grid.hx)
    gy = np.array([-1.0, -1.0, 1.0, 1.0]) / (2 * grid.hy)
    Dx = sp.csr_matrix((np.tile(gx, n), (r, cn.ravel())), shape=(n, grid.n_nodes))
    Dy = sp.csr_matrix((np.tile(gy, n), (r, cn.ravel())), shape=(n, grid.n_nodes))
    return Dx, Dy
