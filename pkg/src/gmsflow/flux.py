"""Locally conservative fluxes from a continuous Galerkin pressure.

Every coarse element is split into four quadrants by its midlines.  A small
4x4 system per element, built from the first basis function of each vertex,
yields the fluxes across the four quadrant interfaces so that every quadrant
balances exactly.  Summing quadrants around a vertex gives its control
volume, whose balance then follows from Galerkin orthogonality.

In ``fine`` mode the coarse control-volume fluxes drive a Neumann problem on
each control volume, and the same element machinery, applied to single fine
cells with bilinear hats, yields fluxes on the fine dual mesh.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import CompatibilityError, ConfigurationError, ConservationDefectError
from .fem import BoundaryConditions, PartitionOfUnity, _assemble, check_coefficient, element_stiffness, source_nodal
from .linalg import SPDSolver, pin_matrix
from .mesh import INTERFACES, OUTFLOW_SIGN, GridHierarchy, StructuredGrid

MODES = ("coarse", "fine")
SYSTEM_RTOL = 1e-10
COMPAT_RTOL = 1e-9


def _line_vector(axis: int, a: float, b: float, hx: float, hy: float) -> np.ndarray:
    """Flux of a unit-coefficient bilinear function across part of a cell line.

    For a vertical line (``axis`` 0) over local y in [a, b] the flux in +x is
    ``-vec . w`` for nodal values ``w`` (SW, SE, NW, NE); likewise in +y for
    a horizontal line over local x in [a, b].
    """
    d = b - a
    d2 = 0.5 * (b * b - a * a)
    c1, c2 = d - d2, d2
    if axis == 0:
        return (hy / hx) * np.array([-c1, c1, -c2, c2])
    return (hx / hy) * np.array([-c1, -c2, c1, c2])


@dataclass(frozen=True)
class ElementGeometry:
    """Quadrant interfaces of an ``rx`` x ``ry`` block of cells, in local cell units.

    ``piece_*`` arrays describe the parts of every interface inside single
    cells: flux_k = -sum coef_cell * vec . w_cell.  When an interface runs
    along cell edges, ``segment`` numbers those edges (-1 otherwise) and both
    adjacent cells enter with weight 1/2.
    """

    rx: int
    ry: int
    piece_cell: np.ndarray  # (n, 2) local (i, j)
    piece_k: np.ndarray
    piece_vec: np.ndarray  # (n, 4)
    piece_segment: np.ndarray
    segment_nodes: np.ndarray  # (m, 2, 2) local node (i, j) of the segment ends
    segment_k: np.ndarray
    quad_frac: np.ndarray  # (ry, rx, 4) area fraction of each cell in each quadrant

    @property
    def grid_aligned(self) -> bool:
        return self.rx % 2 == 0 and self.ry % 2 == 0


@lru_cache(maxsize=16)
def element_geometry(rx: int, ry: int, hx: float, hy: float) -> ElementGeometry:
    cells, ks, vecs, segs, seg_nodes, seg_k = [], [], [], [], [], []
    spans = {0: (0.0, ry / 2), 1: (ry / 2, float(ry)), 2: (0.0, rx / 2), 3: (rx / 2, float(rx))}
    for k in range(4):
        axis = 0 if k < 2 else 1
        pos = rx / 2 if axis == 0 else ry / 2
        lo, hi = spans[k]
        n_along = ry if axis == 0 else rx
        n_across = rx if axis == 0 else ry
        on_line = float(pos).is_integer()
        for t in range(n_along):
            a, b = max(lo, t), min(hi, t + 1)
            if b <= a:
                continue
            vec = _line_vector(axis, a - t, b - t, hx, hy)
            if on_line:
                p = int(pos)
                seg = len(seg_k)
                ends = ((p, t), (p, t + 1)) if axis == 0 else ((t, p), (t + 1, p))
                seg_nodes.append(ends)
                seg_k.append(k)
                across = [(p - 1, 0.5), (p, 0.5)] if 0 < p < n_across else [(min(p, n_across - 1), 1.0)]
            else:
                seg = -1
                across = [(int(np.floor(pos)), 1.0)]
            for s, w in across:
                cells.append((s, t) if axis == 0 else (t, s))
                ks.append(k)
                vecs.append(w * vec)
                segs.append(seg)
    frac = np.zeros((ry, rx, 4))
    xs = [(0.0, rx / 2), (rx / 2, float(rx))]
    ys = [(0.0, ry / 2), (ry / 2, float(ry))]
    for j in range(ry):
        for i in range(rx):
            for q, (qi, qj) in enumerate(((0, 0), (1, 0), (0, 1), (1, 1))):
                ox = max(0.0, min(i + 1, xs[qi][1]) - max(i, xs[qi][0]))
                oy = max(0.0, min(j + 1, ys[qj][1]) - max(j, ys[qj][0]))
                frac[j, i, q] = ox * oy
    return ElementGeometry(
        rx=rx,
        ry=ry,
        piece_cell=np.array(cells, dtype=np.int64),
        piece_k=np.array(ks, dtype=np.int64),
        piece_vec=np.array(vecs),
        piece_segment=np.array(segs, dtype=np.int64),
        segment_nodes=np.array(seg_nodes, dtype=np.int64).reshape(-1, 2, 2),
        segment_k=np.array(seg_k, dtype=np.int64),
        quad_frac=frac,
    )


def assemble_quadrant_matrix(Fl: np.ndarray) -> np.ndarray:
    """Quadrant outflow matrix: A[e, zeta, eta] = sum_k sign[zeta, k] * Fl[e, k, eta]."""
    return np.einsum("zk,ekh->ezh", OUTFLOW_SIGN, Fl)


def solve_quadrant_systems(Fl: np.ndarray, rhs: np.ndarray, scale=None):
    """Solve the pinned 4x4 systems of many elements; returns ``(u, fluxes)``.

    ``Fl[e, k, eta]`` is the flux across interface ``k`` of the ``eta``-th
    vertex function; ``rhs[e, zeta]`` the required interface outflow of
    quadrant ``zeta``.  The vertex-0 coefficient is pinned to zero.  The
    balance check uses the largest scale over all elements.
    """
    A = assemble_quadrant_matrix(Fl)
    rhs = np.asarray(rhs, dtype=float)
    scale = np.abs(rhs).max(axis=1) if scale is None else np.broadcast_to(scale, rhs.shape[:1])
    defect = np.abs(rhs.sum(axis=1))
    bad = np.flatnonzero(defect > COMPAT_RTOL * np.maximum(scale, 1e-300))
    if len(bad):
        e = int(bad[np.argmax(defect[bad])])
        raise ConservationDefectError(f"element {e}: quadrant targets do not balance (defect {defect[e]:.3e})", defect[e])
    Ap = A.copy()
    Ap[:, 0, :] = 0.0
    Ap[:, :, 0] = 0.0
    Ap[:, 0, 0] = 1.0
    b = rhs.copy()
    b[:, 0] = 0.0
    u = np.linalg.solve(Ap, b[..., None])[..., 0]
    # one refinement step; high-contrast vertex functions make these systems stiff
    u += np.linalg.solve(Ap, (b - np.einsum("ezh,eh->ez", Ap, u))[..., None])[..., 0]
    fluxes = np.einsum("ekh,eh->ek", Fl, u)
    res = np.abs(np.einsum("zk,ek->ez", OUTFLOW_SIGN, fluxes) - rhs).max(axis=1)
    tol = SYSTEM_RTOL * max(float(np.max(scale, initial=0.0)), float(np.abs(fluxes).max(initial=0.0)))
    bad = np.flatnonzero(res > tol)
    if len(bad):
        e = int(bad[np.argmax(res[bad])])
        raise ConservationDefectError(f"element {e}: quadrant balance residual {res[e]:.3e}", res[e])
    return u, fluxes


@lru_cache(maxsize=16)
def cell_flux_operator(hx: float, hy: float) -> np.ndarray:
    """4x4 ``T`` with interface fluxes = coef * T @ p for bilinear nodal values ``p`` of one cell."""
    g = element_geometry(1, 1, hx, hy)
    Fl = np.zeros((4, 4))
    for k, vec in zip(g.piece_k, g.piece_vec):
        Fl[k] -= vec
    A = OUTFLOW_SIGN @ Fl
    A[0, :] = 0.0
    A[:, 0] = 0.0
    A[0, 0] = 1.0
    R = np.eye(4)
    R[0, 0] = 0.0
    T = Fl @ np.linalg.solve(A, R @ element_stiffness(hx, hy))
    T.setflags(write=False)
    return T


@lru_cache(maxsize=8)
def _dual_laplacian(nx: int, ny: int, pin: int):
    """Vertex-graph Laplacian of the quadrant interfaces, factorized with ``pin`` fixed."""
    cn = StructuredGrid(nx, ny).cell_nodes
    ia = np.concatenate([cn[:, a] for a, _ in INTERFACES])
    ib = np.concatenate([cn[:, b] for _, b in INTERFACES])
    n = (nx + 1) * (ny + 1)
    ones = np.ones(len(ia))
    L = sp.coo_matrix(
        (np.concatenate([ones, ones, -ones, -ones]), (np.concatenate([ia, ib, ia, ib]), np.concatenate([ia, ib, ib, ia]))),
        shape=(n, n),
    )
    return ia, ib, SPDSolver(pin_matrix(L.tocsc(), np.array([pin])), 1e-6)


@dataclass
class ConservativeFluxField:
    """Fluxes on the dual mesh of ``grid``.

    ``interface[c, k]`` is the flux across quadrant interface ``k`` of cell
    ``c`` in the +x (k < 2) or +y direction.  ``boundary[v]`` is the total
    outward flux of control volume ``v`` through the domain boundary and
    ``source[v]`` its integrated source.
    """

    level: str
    grid: StructuredGrid
    interface: np.ndarray
    boundary: np.ndarray
    source: np.ndarray
    extra_scale: float = 0.0

    def outflow(self) -> np.ndarray:
        g = self.grid
        out = self.boundary.copy()
        cn = g.cell_nodes
        for k, (a, b) in enumerate(INTERFACES):
            np.add.at(out, cn[:, a], self.interface[:, k])
            np.add.at(out, cn[:, b], -self.interface[:, k])
        return out

    def rebalanced(self, free=None, sweeps: int = 2) -> "ConservativeFluxField":
        """Copy with rounding-level imbalance removed.

        Solves a unit-weight graph Laplacian on the vertex graph for a
        potential whose differences cancel the nodal defects.  Needed because
        the explicit transport step amplifies tiny imbalances in regions of
        saturated flow.  The global rounding residue ends up in the boundary
        flux of vertex ``free`` (a Dirichlet vertex, whose boundary flux is
        not prescribed) or, without one, stays at vertex 0.
        """
        g = self.grid
        pin = 0 if free is None else int(free)
        ia, ib, solver = _dual_laplacian(g.nx, g.ny, pin)
        interface = self.interface.copy()
        boundary = self.boundary.copy()
        for _ in range(sweeps):
            d = self.__class__(self.level, g, interface, boundary, self.source).outflow() - self.source
            d[pin] = 0.0
            phi = solver.solve(d)
            interface = interface - (phi[ia] - phi[ib]).reshape(len(INTERFACES), -1).T
        if free is not None:
            d = self.__class__(self.level, g, interface, boundary, self.source).outflow() - self.source
            boundary[pin] -= d[pin]
        return self.__class__(self.level, g, interface, boundary, self.source, self.extra_scale)

    def conservation_defect(self) -> np.ndarray:
        return np.abs(self.outflow() - self.source)

    @property
    def scale(self) -> float:
        return float(
            max(np.abs(self.interface).max(), np.abs(self.boundary).max(), np.abs(self.source).sum(), self.extra_scale)
        )

    def max_relative_defect(self) -> float:
        s = self.scale
        return float(self.conservation_defect().max() / s) if s > 0 else 0.0

    @property
    def measure(self) -> np.ndarray:
        m = np.zeros(self.grid.n_nodes)
        np.add.at(m, self.grid.cell_nodes.ravel(), 0.25 * self.grid.cell_area)
        return m

    def records(self):
        """(cell, k, from vertex, to vertex, flux) per quadrant interface."""
        cn = self.grid.cell_nodes
        for c in range(self.grid.n_cells):
            for k, (a, b) in enumerate(INTERFACES):
                yield c, k, int(cn[c, a]), int(cn[c, b]), float(self.interface[c, k])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"# level {self.level}\n")
            fh.write("element\tinterface\tfrom\tto\tflux\n")
            for c, k, a, b, f in self.records():
                fh.write(f"{c}\t{k}\t{a}\t{b}\t{f:.17g}\n")
            fh.write("# boundary\nvertex\tflux\n")
            for v in np.flatnonzero(self.boundary):
                fh.write(f"{v}\t{self.boundary[v]:.17g}\n")


@dataclass
class ElementFluxes:
    """Per coarse element: quadrant targets, vertex coefficients and interface fluxes."""

    Q: np.ndarray  # (Ne, 4)
    F: np.ndarray
    q_quadrant: np.ndarray
    u: np.ndarray
    interface: np.ndarray  # (Ne, 4)
    Fl: np.ndarray  # (Ne, 4 interfaces, 4 vertices)
    term_scale: float = 0.0  # size of the summands behind Q

    @property
    def boundary_targets(self) -> np.ndarray:
        """Outward flux through the element-boundary part of every quadrant."""
        return self.F - self.Q

    @property
    def rhs(self) -> np.ndarray:
        return self.Q - self.F + self.q_quadrant

    def balance_residual(self) -> np.ndarray:
        return np.abs(np.einsum("zk,ek->ez", OUTFLOW_SIGN, self.interface) - self.rhs)


@dataclass
class DownscaledVelocity:
    field: ConservativeFluxField  # fine dual-mesh fluxes
    pressure: np.ndarray  # per fine cell, (n_cells, 4) nodal values of the local pressure
    edge_flux: np.ndarray  # data on the coarse control-volume boundaries, per fine edge
    compat_defect: np.ndarray  # per coarse control volume


class FluxPostprocessor:
    """Cached geometry for postprocessing pressures on one hierarchy."""

    def __init__(self, hierarchy: GridHierarchy, pou: PartitionOfUnity, bc: BoundaryConditions):
        self.hierarchy = hierarchy
        self.pou = pou
        self.bc = bc
        f, c = hierarchy.fine, hierarchy.coarse
        self.geom = element_geometry(c.rx, c.ry, f.hx, f.hy)
        g = self.geom
        Ne = c.n_cells
        eij = c.cell_ij
        # global fine cell of every (element, piece)
        pi = eij[:, 0, None] * c.rx + g.piece_cell[None, :, 0]
        pj = eij[:, 1, None] * c.ry + g.piece_cell[None, :, 1]
        self.piece_cell = f.cell_id(pi, pj)  # (Ne, P)
        # first basis of each vertex on the cells of its elements: (n_cells, 4 vertices, 4 cell nodes)
        elem = c.cell_to_element
        vert = c.cell_nodes[elem]  # coarse node of each role
        chi = pou.chi.tocsr()
        cn = f.cell_nodes
        rows = np.repeat(cn[:, None, :], 4, axis=1)
        cols = np.repeat(vert[:, :, None], 4, axis=2)
        self.phi_cell = np.asarray(chi[rows.ravel(), cols.ravel()]).reshape(f.n_cells, 4, 4)
        ci, cj = f.cell_ij[:, 0] % c.rx, f.cell_ij[:, 1] % c.ry
        self.quad_frac = g.quad_frac[cj, ci]  # (n_cells, 4)
        self.element = elem
        self.Ne = Ne
        # vertex-wise Neumann data weighted by the partition of unity
        self.neumann_chi = pou.chi.T @ bc.neumann_nodal(f)
        dmask = bc.dirichlet_mask(f)
        self.coarse_dirichlet = dmask[c.fine_node_of]
        self.fine_dirichlet = np.flatnonzero(dmask)
        self._downscale = None

    # ---- coarse element systems -------------------------------------------------
    def flux_matrix(self, coef: np.ndarray) -> np.ndarray:
        """Fl[e, k, eta]: flux across interface k of the first basis of vertex eta."""
        g = self.geom
        cells = self.piece_cell
        vals = -np.einsum("pn,epvn->epv", g.piece_vec, self.phi_cell[cells]) * coef[cells][..., None]
        Fl = np.zeros((self.Ne, 4, 4))
        for k in range(4):
            Fl[:, k, :] = vals[:, g.piece_k == k, :].sum(axis=1)
        return Fl

    def element_targets(self, p: np.ndarray, coef: np.ndarray, q: np.ndarray):
        """Q, F and quadrant source integrals per element, all of shape (Ne, 4)."""
        f = self.hierarchy.fine
        K = element_stiffness(f.hx, f.hy)
        pc = p[f.cell_nodes]
        Qc = coef[:, None] * np.einsum("cvn,nm,cm->cv", self.phi_cell, K, pc)
        Fc = (q * f.cell_area / 4.0)[:, None] * self.phi_cell.sum(axis=2)
        qq = (q * f.cell_area)[:, None] * self.quad_frac
        out = []
        for arr in (Qc, Fc, qq):
            s = np.zeros((self.Ne, 4))
            np.add.at(s, self.element, arr)
            out.append(s)
        return tuple(out)

    def _term_size(self, p: np.ndarray, coef: np.ndarray) -> np.ndarray:
        # size of the summands of Q, so cancellation noise is judged fairly
        f = self.hierarchy.fine
        K = np.abs(element_stiffness(f.hx, f.hy))
        mag = coef * np.einsum("nm,cm->c", K, np.abs(p[f.cell_nodes]))
        out = np.zeros(self.Ne)
        np.add.at(out, self.element, mag)
        return out

    def element_fluxes(self, p: np.ndarray, coef: np.ndarray, q: np.ndarray) -> ElementFluxes:
        Q, F, qq = self.element_targets(p, coef, q)
        Fl = self.flux_matrix(coef)
        rhs = Q - F + qq
        terms = self._term_size(p, coef)
        scale = np.maximum.reduce([np.abs(Q).max(axis=1), np.abs(F).max(axis=1), np.abs(qq).sum(axis=1), terms])
        u, fl = solve_quadrant_systems(Fl, rhs, scale)
        return ElementFluxes(Q, F, qq, u, fl, Fl, float(terms.max(initial=0.0)))

    def assemble(self, ef: ElementFluxes, q: np.ndarray) -> ConservativeFluxField:
        """Coarse control-volume fluxes from the element solutions."""
        c = self.hierarchy.coarse
        source = np.zeros(c.n_nodes)
        np.add.at(source, c.cell_nodes.ravel(), ef.q_quadrant.ravel())
        field_ = ConservativeFluxField("coarse", c, ef.interface, np.zeros(c.n_nodes), source)
        interior_out = field_.outflow()
        boundary = np.where(c.boundary_node_mask, self.neumann_chi, 0.0)
        # Dirichlet vertices take whatever leaves through the boundary
        d = self.coarse_dirichlet
        boundary[d] = source[d] - interior_out[d]
        field_.boundary = boundary
        field_.extra_scale = float(max(np.abs(ef.Q).max(), np.abs(ef.F).max(), ef.term_scale))
        free = np.flatnonzero(d)
        return field_.rebalanced(free[0] if len(free) else None)

    # ---- downscaling ----------------------------------------------------------------
    def _downscale_setup(self):
        if self._downscale is not None:
            return self._downscale
        h = self.hierarchy
        f, c = h.fine, h.coarse
        if not self.geom.grid_aligned:
            raise ConfigurationError(
                f"fine mode needs even coarsening ratios so control volumes align with fine cells, got ({c.rx}, {c.ry})"
            )
        hx2, hy2 = c.rx // 2, c.ry // 2
        I, J = c.node_ij[:, 0], c.node_ij[:, 1]
        i0 = np.maximum(I * c.rx - hx2, 0)
        i1 = np.minimum(I * c.rx + hx2, f.nx)
        j0 = np.maximum(J * c.ry - hy2, 0)
        j1 = np.minimum(J * c.ry + hy2, f.ny)
        mx, my = i1 - i0, j1 - j0
        nn = (mx + 1) * (my + 1)
        offset = np.concatenate([[0], np.cumsum(nn)])
        # every fine cell lies in the volume of the nearest coarse node
        fi, fj = f.cell_ij[:, 0], f.cell_ij[:, 1]
        vol = c.node_id((fi + hx2) // c.rx, (fj + hy2) // c.ry)

        def local(v, i, j):
            return offset[v] + (j - j0[v]) * (mx[v] + 1) + (i - i0[v])

        cn_ij = f.node_ij[f.cell_nodes]  # (n_cells, 4, 2)
        block_cn = local(vol[:, None], cn_ij[..., 0], cn_ij[..., 1])
        # segments on control-volume boundaries inside elements
        g = self.geom
        eij = c.cell_ij
        si = eij[:, 0, None, None] * c.rx + g.segment_nodes[None, :, :, 0]
        sj = eij[:, 1, None, None] * c.ry + g.segment_nodes[None, :, :, 1]
        seg_nodes = f.node_id(si, sj).reshape(-1, 2)
        seg_k = np.tile(g.segment_k, c.n_cells)
        seg_elem = np.repeat(np.arange(c.n_cells), len(g.segment_k))
        a_role = np.array([INTERFACES[k][0] for k in range(4)])[seg_k]
        b_role = np.array([INTERFACES[k][1] for k in range(4)])[seg_k]
        seg_from = c.cell_nodes[seg_elem, a_role]
        seg_to = c.cell_nodes[seg_elem, b_role]
        seg_len = np.where(seg_k < 2, f.hy, f.hx)
        # pieces that belong to segments, for the pointwise flux
        pm = g.piece_segment >= 0
        piece_seg_local = g.piece_segment[pm]
        piece_seg = (np.arange(c.n_cells)[:, None] * len(g.segment_k) + piece_seg_local[None, :]).ravel()
        piece_cells = self.piece_cell[:, pm].ravel()
        piece_vec = np.tile(g.piece_vec[pm], (c.n_cells, 1))
        # domain-boundary fine edges
        be = f.boundary_edges
        mid = f.node_coords[be.nodes].mean(axis=1)
        bvol = c.node_id(np.rint(mid[:, 0] / c.hx).astype(np.int64), np.rint(mid[:, 1] / c.hy).astype(np.int64))
        ncoords = f.node_ij[be.nodes]
        self._downscale = dict(
            vol=vol,
            offset=offset,
            block_cn=block_cn,
            n_block=int(offset[-1]),
            pins=offset[:-1],
            seg_nodes=seg_nodes,
            seg_from=seg_from,
            seg_elem=seg_elem,
            seg_k=seg_k,
            seg_to=seg_to,
            seg_len=seg_len,
            seg_local_from=local(seg_from[:, None], f.node_ij[seg_nodes][..., 0], f.node_ij[seg_nodes][..., 1]),
            seg_local_to=local(seg_to[:, None], f.node_ij[seg_nodes][..., 0], f.node_ij[seg_nodes][..., 1]),
            piece_seg=piece_seg,
            piece_cells=piece_cells,
            piece_vec=piece_vec,
            n_seg=len(seg_k),
            bvol=bvol,
            b_local=local(bvol[:, None], ncoords[..., 0], ncoords[..., 1]),
            b_dirichlet=self.bc.edge_is_dirichlet(f),
            b_neumann=self.bc.neumann_edge_flux(f),
        )
        return self._downscale

    def _boundary_edge_flux(self, nodal: np.ndarray, coef: np.ndarray) -> np.ndarray:
        """Outward one-sided flux through every domain-boundary fine edge."""
        f = self.hierarchy.fine
        be = f.boundary_edges
        w = nodal[be.cell]  # (nb, 4)
        out = np.zeros(len(be))
        for side, axis, sign in (("bottom", 1, -1.0), ("top", 1, 1.0), ("left", 0, -1.0), ("right", 0, 1.0)):
            m = be.side == side
            vec = _line_vector(axis, 0.0, 1.0, f.hx, f.hy)
            out[m] = -sign * coef[be.cell[m]] * (w[m] @ vec)
        return out

    def downscale(self, ef: ElementFluxes, coarse: ConservativeFluxField, coef, q, tol: float = 1e-10):
        """Fine conservative fluxes from Neumann problems on the coarse control volumes."""
        s = self._downscale_setup()
        h = self.hierarchy
        f, c = h.fine, h.coarse
        # pointwise flux of the element reconstruction on each volume-boundary edge
        nodal = np.einsum("cv,cvn->cn", ef.u[self.element], self.phi_cell)
        pf = -coef[s["piece_cells"]] * np.einsum("pn,pn->p", s["piece_vec"], nodal[s["piece_cells"]])
        seg_flux = np.bincount(s["piece_seg"], weights=pf, minlength=s["n_seg"])
        # remove rounding so the edges of each interface add up to its element flux
        key = s["seg_elem"] * 4 + s["seg_k"]
        total = np.bincount(key, weights=seg_flux, minlength=4 * c.n_cells)
        count = np.bincount(key, minlength=4 * c.n_cells)
        seg_flux += ((ef.interface.ravel() - total) / np.maximum(count, 1))[key]
        # boundary edges: Neumann data or one-sided flux, corrected to the coarse boundary totals
        be = f.boundary_edges
        g_b = np.where(s["b_dirichlet"], self._boundary_edge_flux(nodal, coef), s["b_neumann"])
        total = np.bincount(s["bvol"], weights=g_b, minlength=c.n_nodes)
        mismatch = coarse.boundary - total
        wts = coef[be.cell] * be.length
        has_d = np.bincount(s["bvol"], weights=s["b_dirichlet"].astype(float), minlength=c.n_nodes) > 0
        use = np.where(has_d[s["bvol"]], s["b_dirichlet"], True)
        wts = np.where(use, wts, 0.0)
        wsum = np.bincount(s["bvol"], weights=wts, minlength=c.n_nodes)
        g_b = g_b + np.where(wsum[s["bvol"]] > 0, mismatch[s["bvol"]] * wts / np.where(wsum > 0, wsum, 1.0)[s["bvol"]], 0.0)
        # block-diagonal Neumann problems, one pinned node per volume
        n = s["n_block"]
        A = _assemble(s["block_cn"], coef, element_stiffness(f.hx, f.hy), n)
        b = np.zeros(n)
        np.add.at(b, s["block_cn"].ravel(), np.repeat(q * f.cell_area / 4.0, 4))
        half = 0.5 * seg_flux
        for end in (0, 1):
            np.add.at(b, s["seg_local_from"][:, end], -half)
            np.add.at(b, s["seg_local_to"][:, end], half)
            np.add.at(b, s["b_local"][:, end], -0.5 * g_b)
        offs = s["offset"]
        sums = np.add.reduceat(b, offs[:-1])
        absb = np.add.reduceat(np.abs(b), offs[:-1])
        scale = max(coarse.scale, 1e-300)
        worst = int(np.argmax(np.abs(sums)))
        if abs(sums[worst]) > COMPAT_RTOL * scale:
            raise CompatibilityError(
                f"control volume {worst}: Neumann data out of balance by {sums[worst]:.3e}", float(sums[worst])
            )
        b[s["pins"]] = 0.0
        x = SPDSolver(pin_matrix(A, s["pins"]), tol).solve(b)
        P = x[s["block_cn"]]
        T = cell_flux_operator(f.hx, f.hy)
        interface = coef[:, None] * (P @ T.T)
        boundary = np.zeros(f.n_nodes)
        for end in (0, 1):
            np.add.at(boundary, be.nodes[:, end], 0.5 * g_b)
        source = source_nodal(f, q)
        fine = ConservativeFluxField("fine", f, interface, boundary, source, extra_scale=coarse.scale)
        fine = fine.rebalanced(self.fine_dirichlet[0] if len(self.fine_dirichlet) else None)
        return DownscaledVelocity(fine, P, seg_flux, sums / np.maximum(absb, 1e-300))

    def postprocess(self, p: np.ndarray, coef, q=None, mode: str = "coarse", check: bool = True):
        """Conservative fluxes of nodal pressure ``p`` for coefficient ``coef`` (lambda * kappa)."""
        if mode not in MODES:
            raise ConfigurationError(f"unknown mode {mode!r}; choose from {MODES}")
        f = self.hierarchy.fine
        coef = check_coefficient(f, coef)
        q = np.zeros(f.n_cells) if q is None else np.broadcast_to(np.asarray(q, float).ravel(), (f.n_cells,))
        ef = self.element_fluxes(np.asarray(p, float), coef, q)
        coarse = self.assemble(ef, q)
        result = FluxResult(mode, ef, coarse, None)
        if mode == "fine":
            result.downscaled = self.downscale(ef, coarse, coef, q)
        if check:
            result.audit()
        return result


@dataclass
class FluxResult:
    mode: str
    elements: ElementFluxes
    coarse: ConservativeFluxField
    downscaled: DownscaledVelocity = None
    audit_tol: float = field(default=1e-10)

    @property
    def field(self) -> ConservativeFluxField:
        """Flux field used for transport: fine dual mesh in fine mode, coarse dual mesh otherwise."""
        return self.downscaled.field if self.downscaled is not None else self.coarse

    def audit(self) -> dict:
        """Largest relative control-volume defects; raises when above ``audit_tol``."""
        out = {"coarse": self.coarse.max_relative_defect()}
        if self.downscaled is not None:
            out["fine"] = self.downscaled.field.max_relative_defect()
        for level, d in out.items():
            if d > self.audit_tol:
                raise ConservationDefectError(f"{level} control volumes violate conservation (relative {d:.3e})", d)
        return out


def postprocess(p, hierarchy: GridHierarchy, pou: PartitionOfUnity, coef, q, bc: BoundaryConditions, mode="coarse"):
    return FluxPostprocessor(hierarchy, pou, bc).postprocess(p, coef, q, mode)


def velocity_error(result: FluxResult, reference: FluxResult) -> float:
    """Relative l2 difference of the transport-level interface fluxes."""
    a, b = result.field.interface, reference.field.interface
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / nb) if nb > 0 else float(np.linalg.norm(a - b))
