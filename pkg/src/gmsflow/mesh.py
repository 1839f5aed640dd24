"""Two-level structured rectangular grids, coarse neighborhoods and dual meshes.

Conventions used everywhere in the package:

* nodes and cells are numbered row-major, x fastest: node ``(i, j)`` has id
  ``j * (nx + 1) + i`` and cell ``(i, j)`` has id ``j * nx + i``;
* the four corners of a cell (or coarse element) are ordered SW, SE, NW, NE;
* each element is split into four quadrants, one per corner, and the four
  quadrant interfaces are numbered as in :data:`INTERFACES`.  A positive
  interface flux runs from the first quadrant of the pair to the second.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigurationError

SW, SE, NW, NE = 0, 1, 2, 3
CORNER_OFFSETS = ((0, 0), (1, 0), (0, 1), (1, 1))

INTERFACES = ((SW, SE), (NW, NE), (SW, NW), (SE, NE))
# 0: vertical half-line in the lower half, 1: vertical upper, 2: horizontal left, 3: horizontal right
INTERFACE_AXIS = (0, 0, 1, 1)

# OUTFLOW_SIGN[quadrant, interface]: contribution of interface flux to the quadrant's outflow
OUTFLOW_SIGN = np.array(
    [
        [1.0, 0.0, 1.0, 0.0],
        [-1.0, 0.0, 0.0, 1.0],
        [0.0, 1.0, -1.0, 0.0],
        [0.0, -1.0, 0.0, -1.0],
    ]
)

SIDES = ("bottom", "right", "top", "left")


class StructuredGrid:
    """Uniform rectangular grid of ``nx`` by ``ny`` cells on ``[0, lx] x [0, ly]``."""

    def __init__(self, nx: int, ny: int, lx: float = 1.0, ly: float = 1.0):
        if nx < 1 or ny < 1:
            raise ConfigurationError(f"cell counts must be >= 1, got ({nx}, {ny})")
        if lx <= 0 or ly <= 0:
            raise ConfigurationError(f"domain extents must be positive, got ({lx}, {ly})")
        self.nx = int(nx)
        self.ny = int(ny)
        self.lx = float(lx)
        self.ly = float(ly)
        self.hx = self.lx / self.nx
        self.hy = self.ly / self.ny

    def __repr__(self):
        return f"StructuredGrid(nx={self.nx}, ny={self.ny}, lx={self.lx}, ly={self.ly})"

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    def node_id(self, i, j):
        return np.asarray(j) * (self.nx + 1) + np.asarray(i)

    def cell_id(self, i, j):
        return np.asarray(j) * self.nx + np.asarray(i)

    @cached_property
    def node_ij(self) -> np.ndarray:
        j, i = np.divmod(np.arange(self.n_nodes), self.nx + 1)
        return np.column_stack([i, j])

    @cached_property
    def node_coords(self) -> np.ndarray:
        ij = self.node_ij
        return np.column_stack([ij[:, 0] * self.hx, ij[:, 1] * self.hy])

    @cached_property
    def cell_ij(self) -> np.ndarray:
        j, i = np.divmod(np.arange(self.n_cells), self.nx)
        return np.column_stack([i, j])

    @cached_property
    def cell_centers(self) -> np.ndarray:
        ij = self.cell_ij
        return np.column_stack([(ij[:, 0] + 0.5) * self.hx, (ij[:, 1] + 0.5) * self.hy])

    @cached_property
    def cell_nodes(self) -> np.ndarray:
        """(n_cells, 4) node ids in SW, SE, NW, NE order."""
        ij = self.cell_ij
        sw = self.node_id(ij[:, 0], ij[:, 1])
        w = self.nx + 1
        out = np.column_stack([sw, sw + 1, sw + w, sw + w + 1])
        out.setflags(write=False)
        return out

    def side_nodes(self, side: str) -> np.ndarray:
        """Node ids along one side of the domain, in increasing coordinate order."""
        nx, ny = self.nx, self.ny
        if side == "bottom":
            return self.node_id(np.arange(nx + 1), 0)
        if side == "top":
            return self.node_id(np.arange(nx + 1), ny)
        if side == "left":
            return self.node_id(0, np.arange(ny + 1))
        if side == "right":
            return self.node_id(nx, np.arange(ny + 1))
        raise ConfigurationError(f"unknown side {side!r}")

    @cached_property
    def boundary_edges(self) -> "BoundaryEdges":
        nx, ny = self.nx, self.ny
        nodes, side, cell, length = [], [], [], []
        for s in SIDES:
            sn = self.side_nodes(s)
            nodes.append(np.column_stack([sn[:-1], sn[1:]]))
            side += [s] * (len(sn) - 1)
            if s == "bottom":
                cell.append(self.cell_id(np.arange(nx), 0))
                length.append(np.full(nx, self.hx))
            elif s == "top":
                cell.append(self.cell_id(np.arange(nx), ny - 1))
                length.append(np.full(nx, self.hx))
            elif s == "left":
                cell.append(self.cell_id(0, np.arange(ny)))
                length.append(np.full(ny, self.hy))
            else:
                cell.append(self.cell_id(nx - 1, np.arange(ny)))
                length.append(np.full(ny, self.hy))
        return BoundaryEdges(
            nodes=np.vstack(nodes),
            side=np.array(side),
            cell=np.concatenate(cell),
            length=np.concatenate(length),
        )

    @cached_property
    def boundary_node_mask(self) -> np.ndarray:
        ij = self.node_ij
        return (ij[:, 0] == 0) | (ij[:, 0] == self.nx) | (ij[:, 1] == 0) | (ij[:, 1] == self.ny)


@dataclass(frozen=True)
class BoundaryEdges:
    nodes: np.ndarray  # (n, 2) endpoint node ids, ordered by increasing coordinate
    side: np.ndarray
    cell: np.ndarray
    length: np.ndarray

    def __len__(self):
        return len(self.side)


# The fine grid carries no extra structure beyond a plain structured grid.
FineGrid = StructuredGrid


class CoarseGrid(StructuredGrid):
    """Coarse partition whose elements are ``rx`` by ``ry`` blocks of fine cells."""

    def __init__(self, fine: StructuredGrid, Nx: int, Ny: int):
        if Nx < 1 or Ny < 1:
            raise ConfigurationError(f"coarse counts must be >= 1, got ({Nx}, {Ny})")
        if fine.nx % Nx:
            raise ConfigurationError(f"Nx={Nx} does not divide nx={fine.nx}")
        if fine.ny % Ny:
            raise ConfigurationError(f"Ny={Ny} does not divide ny={fine.ny}")
        super().__init__(Nx, Ny, fine.lx, fine.ly)
        self.fine = fine
        self.rx = fine.nx // Nx
        self.ry = fine.ny // Ny

    def __repr__(self):
        return f"CoarseGrid(Nx={self.nx}, Ny={self.ny}, rx={self.rx}, ry={self.ry})"

    @property
    def Nx(self) -> int:
        return self.nx

    @property
    def Ny(self) -> int:
        return self.ny

    @cached_property
    def fine_node_of(self) -> np.ndarray:
        """Fine node id of every coarse node."""
        ij = self.node_ij
        return self.fine.node_id(ij[:, 0] * self.rx, ij[:, 1] * self.ry)

    @cached_property
    def cell_to_element(self) -> np.ndarray:
        ij = self.fine.cell_ij
        return self.cell_id(ij[:, 0] // self.rx, ij[:, 1] // self.ry)

    @cached_property
    def element_cells(self) -> np.ndarray:
        """(Ne, rx*ry) fine cell ids of each coarse element (the index sets I_j), row-major."""
        ij = self.cell_ij
        di, dj = np.meshgrid(np.arange(self.rx), np.arange(self.ry))
        fi = ij[:, 0, None] * self.rx + di.ravel()[None, :]
        fj = ij[:, 1, None] * self.ry + dj.ravel()[None, :]
        return self.fine.cell_id(fi, fj)


@dataclass(frozen=True)
class Neighborhood:
    """Coarse neighborhood D_i: union of the coarse elements touching coarse node ``index``."""

    index: int
    center: tuple  # coarse (I, J)
    elements: tuple
    i_range: tuple  # inclusive fine node index range along x
    j_range: tuple
    nodes: np.ndarray  # fine node ids of the patch, row-major
    cells: np.ndarray  # fine cell ids of the patch, row-major
    boundary_local: np.ndarray  # local indices of nodes on dD_i, counter-clockwise
    interior_local: np.ndarray
    support_local: np.ndarray  # local nodes not on the part of dD_i interior to the domain

    @property
    def shape(self) -> tuple:
        """Patch size in fine cells, (mx, my)."""
        return (self.i_range[1] - self.i_range[0], self.j_range[1] - self.j_range[0])

    @property
    def boundary_nodes(self) -> np.ndarray:
        return self.nodes[self.boundary_local]

    @property
    def L(self) -> int:
        return len(self.boundary_local)

    @property
    def n_local(self) -> int:
        return len(self.nodes)


def _patch_boundary_ccw(mx: int, my: int) -> np.ndarray:
    """Local boundary node indices of an (mx+1) x (my+1) node patch, CCW from the SW corner."""
    w = mx + 1
    bottom = [i for i in range(mx + 1)]
    right = [j * w + mx for j in range(1, my + 1)]
    top = [my * w + i for i in range(mx - 1, -1, -1)]
    left = [j * w for j in range(my - 1, 0, -1)]
    return np.array(bottom + right + top + left, dtype=np.int64)


def patch_node_ids(grid: StructuredGrid, i0, i1, j0, j1) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1))
    return grid.node_id(ii.ravel(), jj.ravel())


def patch_cell_ids(grid: StructuredGrid, i0, i1, j0, j1) -> np.ndarray:
    """Cells of the node-index box [i0, i1] x [j0, j1]."""
    ii, jj = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1))
    return grid.cell_id(ii.ravel(), jj.ravel())


def _build_neighborhood(fine, coarse, k) -> Neighborhood:
    I, J = (int(v) for v in coarse.node_ij[k])
    Is = [e for e in (I - 1, I) if 0 <= e < coarse.nx]
    Js = [e for e in (J - 1, J) if 0 <= e < coarse.ny]
    elements = tuple(int(coarse.cell_id(a, b)) for b in Js for a in Is)
    i0, i1 = Is[0] * coarse.rx, (Is[-1] + 1) * coarse.rx
    j0, j1 = Js[0] * coarse.ry, (Js[-1] + 1) * coarse.ry
    mx, my = i1 - i0, j1 - j0
    nodes = patch_node_ids(fine, i0, i1, j0, j1)
    bnd = _patch_boundary_ccw(mx, my)
    interior = np.setdiff1d(np.arange(len(nodes)), bnd)
    # boundary nodes lying on the domain boundary keep nonzero basis values
    li, lj = np.divmod(np.arange(len(nodes)), mx + 1)[::-1]
    on_inner_edge = np.zeros(len(nodes), bool)
    if i0 > 0:
        on_inner_edge |= li == 0
    if i1 < fine.nx:
        on_inner_edge |= li == mx
    if j0 > 0:
        on_inner_edge |= lj == 0
    if j1 < fine.ny:
        on_inner_edge |= lj == my
    for arr in (nodes, bnd, interior):
        arr.setflags(write=False)
    return Neighborhood(
        index=k,
        center=(I, J),
        elements=elements,
        i_range=(i0, i1),
        j_range=(j0, j1),
        nodes=nodes,
        cells=patch_cell_ids(fine, i0, i1, j0, j1),
        boundary_local=bnd,
        interior_local=interior,
        support_local=np.flatnonzero(~on_inner_edge),
    )


@dataclass(frozen=True)
class ControlVolume:
    vertex: int
    quadrants: tuple  # (element, corner role)
    interfaces: tuple  # (element, interface k, +1 if positive flux leaves this volume)
    boundary_segments: tuple  # (side, length) pieces on the domain boundary
    measure: float
    interface_length: float

    @property
    def boundary_length(self) -> float:
        return self.interface_length + sum(length for _, length in self.boundary_segments)


class DualMesh:
    """Vertex-centred control volumes of a structured grid, split into element quadrants."""

    def __init__(self, grid: StructuredGrid):
        self.grid = grid

    @property
    def n_volumes(self) -> int:
        return self.grid.n_nodes

    @property
    def quadrant_area(self) -> float:
        return 0.25 * self.grid.cell_area

    @cached_property
    def interface_length(self) -> np.ndarray:
        g = self.grid
        return np.array([g.hy / 2, g.hy / 2, g.hx / 2, g.hx / 2])

    @cached_property
    def interface_vertices(self) -> np.ndarray:
        """(n_cells, 4, 2) vertex ids (from, to) of every quadrant interface."""
        cn = self.grid.cell_nodes
        pairs = np.array(INTERFACES)
        return cn[:, pairs]

    @cached_property
    def measure(self) -> np.ndarray:
        m = np.zeros(self.n_volumes)
        np.add.at(m, self.grid.cell_nodes.ravel(), self.quadrant_area)
        return m

    def control_volume_of(self, vertex: int) -> ControlVolume:
        g = self.grid
        i, j = (int(v) for v in g.node_ij[vertex])
        quads, ifaces = [], []
        for role, (di, dj) in enumerate(CORNER_OFFSETS):
            ci, cj = i - di, j - dj
            if 0 <= ci < g.nx and 0 <= cj < g.ny:
                c = int(g.cell_id(ci, cj))
                quads.append((c, role))
                for k, (a, b) in enumerate(INTERFACES):
                    if a == role:
                        ifaces.append((c, k, 1))
                    elif b == role:
                        ifaces.append((c, k, -1))
        segs = []
        if i == 0 or i == g.nx:
            side = "left" if i == 0 else "right"
            segs.append((side, g.hy * ((j > 0) + (j < g.ny)) / 2))
        if j == 0 or j == g.ny:
            side = "bottom" if j == 0 else "top"
            segs.append((side, g.hx * ((i > 0) + (i < g.nx)) / 2))
        ilen = float(sum(self.interface_length[k] for _, k, _ in ifaces))
        return ControlVolume(
            vertex=int(vertex),
            quadrants=tuple(quads),
            interfaces=tuple(ifaces),
            boundary_segments=tuple(segs),
            measure=float(self.measure[vertex]),
            interface_length=ilen,
        )


class GridHierarchy:
    """Fine grid, coarse grid, coarse neighborhoods and both dual meshes."""

    def __init__(self, fine: StructuredGrid, coarse: CoarseGrid):
        self.fine = fine
        self.coarse = coarse
        self.neighborhoods = tuple(_build_neighborhood(fine, coarse, k) for k in range(coarse.n_nodes))
        self.fine_dual = DualMesh(fine)
        self.coarse_dual = DualMesh(coarse)

    def __repr__(self):
        f, c = self.fine, self.coarse
        return f"GridHierarchy(fine={f.nx}x{f.ny}, coarse={c.nx}x{c.ny})"

    def dual(self, level: str) -> DualMesh:
        if level == "fine":
            return self.fine_dual
        if level == "coarse":
            return self.coarse_dual
        raise ConfigurationError(f"unknown level {level!r}")

    @cached_property
    def interior_coarse_nodes(self) -> np.ndarray:
        return np.flatnonzero(~self.coarse.boundary_node_mask)

    def neighborhoods_containing(self, fine_node: int) -> list:
        """Neighborhoods whose basis functions may be nonzero at ``fine_node``."""
        out = []
        i, j = self.fine.node_ij[fine_node]
        for nb in self.neighborhoods:
            (i0, i1), (j0, j1) = nb.i_range, nb.j_range
            if i0 <= i <= i1 and j0 <= j <= j1:
                loc = (j - j0) * (i1 - i0 + 1) + (i - i0)
                if loc in nb.support_local:
                    out.append(nb.index)
        return out


def build_grid_hierarchy(nx: int, ny: int, Nx: int, Ny: int, lx: float = 1.0, ly: float = 1.0) -> GridHierarchy:
    fine = StructuredGrid(nx, ny, lx, ly)
    return GridHierarchy(fine, CoarseGrid(fine, Nx, Ny))


def neighborhood_boundary_nodes(nb: Neighborhood) -> np.ndarray:
    """Fine nodes on the boundary of ``nb`` in counter-clockwise order."""
    return nb.boundary_nodes


def control_volume_of(hierarchy: GridHierarchy, vertex: int, level: str = "coarse") -> ControlVolume:
    return hierarchy.dual(level).control_volume_of(vertex)
