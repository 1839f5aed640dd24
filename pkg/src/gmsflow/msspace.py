"""Snapshot spaces, local spectral decomposition, offline multiscale space and coarse solve."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import ConfigurationError, RankDeficiencyError, SingularMatrixError, SolverError
from .fem import (
    PartitionOfUnity,
    PressureSystem,
    cell_gradients,
    check_coefficient,
    patch_mass,
    patch_stiffness,
)
from .linalg import SPDSolver, eig_sym_generalized
from .mesh import GridHierarchy, Neighborhood

log = logging.getLogger(__name__)

GRAM_TOL = 1e-10
DENSE_LIMIT = 3000


def patch_values(hierarchy: GridHierarchy, cellfield, nb: Neighborhood) -> np.ndarray:
    """Restriction of a cell field to the cells of ``nb`` as an (my, mx) array."""
    f = hierarchy.fine
    c = np.asarray(cellfield, dtype=float).reshape(f.ny, f.nx)
    (i0, i1), (j0, j1) = nb.i_range, nb.j_range
    return c[j0:j1, i0:i1]


@dataclass
class SnapshotSpace:
    """Harmonic extensions of boundary spikes; ``psi[i]`` is (n_local, L_i) on D_i."""

    hierarchy: GridHierarchy
    psi: list

    def __getitem__(self, i) -> np.ndarray:
        return self.psi[i]


def neighborhood_snapshots(hierarchy: GridHierarchy, coeff, nb: Neighborhood) -> np.ndarray:
    f = hierarchy.fine
    K = patch_stiffness(patch_values(hierarchy, coeff, nb), f.hx, f.hy)
    B, I = nb.boundary_local, nb.interior_local
    psi = np.zeros((nb.n_local, len(B)))
    psi[B, np.arange(len(B))] = 1.0
    if len(I):
        Kii = K[I][:, I]
        rhs = -(K[I][:, B]).toarray()
        try:
            psi[I] = SPDSolver(Kii).solve(rhs)
        except SolverError as exc:
            raise SolverError(f"snapshot solve failed in neighborhood {nb.index}: {exc}", exc.residual) from exc
    return psi


def build_snapshots(hierarchy: GridHierarchy, coeff) -> SnapshotSpace:
    check_coefficient(hierarchy.fine, coeff)
    return SnapshotSpace(hierarchy, [neighborhood_snapshots(hierarchy, coeff, nb) for nb in hierarchy.neighborhoods])


def compute_weight_khat(hierarchy: GridHierarchy, coeff, pou: PartitionOfUnity) -> np.ndarray:
    """Cell field kappa * H^2 * sum_i |grad chi_i|^2 with midpoint gradients."""
    c = check_coefficient(hierarchy.fine, coeff)
    Dx, Dy = cell_gradients(hierarchy.fine)
    gx = Dx @ pou.chi
    gy = Dy @ pou.chi
    s = np.asarray(gx.multiply(gx).sum(axis=1)).ravel() + np.asarray(gy.multiply(gy).sum(axis=1)).ravel()
    H = max(hierarchy.coarse.hx, hierarchy.coarse.hy)
    return c * H**2 * s


@dataclass(frozen=True)
class LocalEigenpairs:
    values: np.ndarray
    vectors: np.ndarray  # snapshot coordinates, columns
    shift: float


def local_spectral(hierarchy: GridHierarchy, psi: np.ndarray, nb: Neighborhood, coeff, khat) -> LocalEigenpairs:
    """Stiffness/weighted-mass eigenpairs of the snapshot space of ``nb``, ascending."""
    f = hierarchy.fine
    A = patch_stiffness(patch_values(hierarchy, coeff, nb), f.hx, f.hy)
    M = patch_mass(patch_values(hierarchy, khat, nb), f.hx, f.hy)
    As = psi.T @ (A @ psi)
    Ms = psi.T @ (M @ psi)
    res = eig_sym_generalized(As, Ms)
    return LocalEigenpairs(res.values, res.vectors, res.shift)


@dataclass
class SpectralDecomposition:
    pairs: list  # LocalEigenpairs per neighborhood
    counts: np.ndarray = None  # chosen l_i

    def eigenvalues(self, i) -> np.ndarray:
        return self.pairs[i].values

    @property
    def Lambda(self) -> float:
        """Smallest excluded eigenvalue over all neighborhoods."""
        if self.counts is None:
            raise ConfigurationError("no basis counts selected yet")
        excluded = [p.values[l] for p, l in zip(self.pairs, self.counts) if l < len(p.values)]
        return float(min(excluded)) if excluded else float("inf")


def spectral_decomposition(hierarchy, snapshots: SnapshotSpace, coeff, khat) -> SpectralDecomposition:
    return SpectralDecomposition(
        [local_spectral(hierarchy, snapshots[nb.index], nb, coeff, khat) for nb in hierarchy.neighborhoods]
    )


@dataclass(frozen=True)
class MultiscaleSpace:
    """Fine-grid basis vectors (columns of ``basis``) with their owning coarse node."""

    hierarchy: GridHierarchy
    pou: PartitionOfUnity
    basis: sp.csc_matrix
    owner: np.ndarray
    kind: tuple  # "offline" / "online" per column
    eigenvalue: np.ndarray  # nan for online vectors
    level: int = 0
    dropped: tuple = field(default=())

    @property
    def dimension(self) -> int:
        return self.basis.shape[1]

    @property
    def offline_count(self) -> int:
        return sum(k == "offline" for k in self.kind)

    def columns_of(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.owner == i)

    def with_online(self, vectors, owners) -> "MultiscaleSpace":
        """New space with extra columns appended and the enrichment level raised by one."""
        if len(vectors) == 0:
            return replace(self, level=self.level + 1)
        new = sp.csc_matrix(np.column_stack(vectors))
        new.eliminate_zeros()
        basis = sp.hstack([self.basis, new], format="csc")
        return replace(
            self,
            basis=basis,
            owner=np.concatenate([self.owner, np.asarray(owners, dtype=np.int64)]),
            kind=self.kind + ("online",) * len(vectors),
            eigenvalue=np.concatenate([self.eigenvalue, np.full(len(vectors), np.nan)]),
            level=self.level + 1,
        )

    @classmethod
    def full(cls, hierarchy: GridHierarchy, pou: PartitionOfUnity) -> "MultiscaleSpace":
        """The whole fine space (identity prolongation)."""
        n = hierarchy.fine.n_nodes
        return cls(
            hierarchy=hierarchy,
            pou=pou,
            basis=sp.identity(n, format="csc"),
            owner=np.full(n, -1, dtype=np.int64),
            kind=("fine",) * n,
            eigenvalue=np.full(n, np.nan),
        )

    def save(self, directory) -> None:
        """Write ``basis.npz`` (fine node x basis vector) and ``basis_manifest.txt``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        sp.save_npz(d / "basis.npz", self.basis, compressed=False)
        with open(d / "basis_manifest.txt", "w") as fh:
            fh.write(f"# level {self.level}\n")
            fh.write("column\towner\ttype\teigenvalue\n")
            for k in range(self.dimension):
                fh.write(f"{k}\t{self.owner[k]}\t{self.kind[k]}\t{float(self.eigenvalue[k])!r}\n")

    @classmethod
    def load(cls, directory, hierarchy: GridHierarchy, pou: PartitionOfUnity) -> "MultiscaleSpace":
        d = Path(directory)
        basis = sp.load_npz(d / "basis.npz").tocsc()
        owner, kind, ev = [], [], []
        level = 0
        with open(d / "basis_manifest.txt") as fh:
            for line in fh:
                if line.startswith("# level"):
                    level = int(line.split()[-1])
                    continue
                if line.startswith("column"):
                    continue
                _, o, k, e = line.rstrip("\n").split("\t")
                owner.append(int(o))
                kind.append(k)
                ev.append(float(e))
        if basis.shape != (hierarchy.fine.n_nodes, len(owner)):
            raise ConfigurationError(f"basis shape {basis.shape} does not match manifest/hierarchy")
        return cls(hierarchy, pou, basis, np.array(owner, dtype=np.int64), tuple(kind), np.array(ev), level)


def _gram_filter(vectors: np.ndarray, tol: float = GRAM_TOL) -> list:
    """Indices of columns kept by modified Gram-Schmidt; near-dependent ones are dropped."""
    keep, Q = [], []
    for k in range(vectors.shape[1]):
        v = vectors[:, k].copy()
        n0 = np.linalg.norm(v)
        for q in Q:
            v -= (q @ v) * q
        nv = np.linalg.norm(v)
        if n0 == 0 or nv <= tol * n0:
            continue
        Q.append(v / nv)
        keep.append(k)
    return keep


def _counts(hierarchy: GridHierarchy, l) -> np.ndarray:
    n = len(hierarchy.neighborhoods)
    counts = np.full(n, l, dtype=np.int64) if np.isscalar(l) else np.asarray(l, dtype=np.int64)
    if counts.shape != (n,):
        raise ConfigurationError(f"need one basis count per coarse node ({n})")
    if np.any(counts < 1):
        raise ConfigurationError("basis counts must be >= 1")
    for nb, c in zip(hierarchy.neighborhoods, counts):
        if c > nb.L:
            raise ConfigurationError(f"l={c} exceeds L_i={nb.L} in neighborhood {nb.index}")
    return counts


def build_offline_space(
    hierarchy: GridHierarchy,
    snapshots: SnapshotSpace,
    spectral: SpectralDecomposition,
    pou: PartitionOfUnity,
    l,
) -> MultiscaleSpace:
    """Products chi_i * phi_j for the l_i smallest eigenvalues of each neighborhood.

    The first function of every neighborhood is chi_i itself: the lowest
    eigenvector spans the constants, and fixing it exactly keeps the first
    basis functions a partition of unity.
    """
    counts = _counts(hierarchy, l)
    spectral.counts = counts
    cols, owners, evs, dropped = [], [], [], []
    for nb, li in zip(hierarchy.neighborhoods, counts):
        pairs = spectral.pairs[nb.index]
        chi = pou.chi[nb.nodes, nb.index].toarray().ravel()
        phis = snapshots[nb.index] @ pairs.vectors[:, :li]
        phis[:, 0] = 1.0
        local = chi[:, None] * phis
        local /= np.abs(local).max(axis=0)
        keep = _gram_filter(local)
        for k in set(range(li)) - set(keep):
            log.info("dropped near-dependent basis %d of neighborhood %d", k, nb.index)
            dropped.append((nb.index, k))
        for k in keep:
            col = np.zeros(hierarchy.fine.n_nodes)
            col[nb.nodes] = local[:, k]
            cols.append(col)
            owners.append(nb.index)
            evs.append(pairs.values[k])
    basis = sp.csc_matrix(np.column_stack(cols))
    basis.eliminate_zeros()
    return MultiscaleSpace(
        hierarchy=hierarchy,
        pou=pou,
        basis=basis,
        owner=np.array(owners, dtype=np.int64),
        kind=("offline",) * len(owners),
        eigenvalue=np.array(evs),
        level=0,
        dropped=tuple(dropped),
    )


@dataclass
class OfflineBuild:
    """Everything computed while building an offline space."""

    pou: PartitionOfUnity
    khat: np.ndarray
    snapshots: SnapshotSpace
    spectral: SpectralDecomposition


def prepare_offline(hierarchy: GridHierarchy, coeff, pou: PartitionOfUnity = None) -> OfflineBuild:
    from .fem import build_partition_of_unity

    pou = pou or build_partition_of_unity(hierarchy, coeff)
    khat = compute_weight_khat(hierarchy, coeff, pou)
    snaps = build_snapshots(hierarchy, coeff)
    return OfflineBuild(pou, khat, snaps, spectral_decomposition(hierarchy, snaps, coeff, khat))


def offline_space(hierarchy: GridHierarchy, coeff, l, prepared: OfflineBuild = None) -> MultiscaleSpace:
    prepared = prepared or prepare_offline(hierarchy, coeff)
    return build_offline_space(hierarchy, prepared.snapshots, prepared.spectral, prepared.pou, l)


@dataclass(frozen=True)
class CoarseSolution:
    coefficients: np.ndarray
    pressure: np.ndarray  # fine nodal p_H including the Dirichlet lifting
    residual: float


def _dirichlet_free_basis(space: MultiscaleSpace, system: PressureSystem) -> sp.csc_matrix:
    mask = np.ones(space.basis.shape[0])
    mask[system.dirichlet_nodes] = 0.0
    P0 = sp.diags(mask) @ space.basis
    return sp.csc_matrix(P0)


def _near_dependent(Ac: np.ndarray, rtol: float = 1e-13) -> list:
    d = np.sqrt(np.clip(np.diag(Ac), 1e-300, None))
    S = Ac / np.outer(d, d)
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    bad = np.flatnonzero(w <= rtol * max(w.max(), 1.0))
    cols = set()
    for b in bad:
        v = np.abs(V[:, b])
        cols.update(np.flatnonzero(v >= 0.1 * v.max()).tolist())
    return sorted(cols)


def _solve_coarse_sparse(space, Ac, b, lift, P0, tol):
    active = np.flatnonzero(Ac.diagonal() > 0)
    Aa = Ac[active][:, active]
    try:
        xa = SPDSolver(Aa, tol).solve(b[active])
    except SingularMatrixError as exc:
        raise RankDeficiencyError(f"coarse matrix is singular: {exc}", []) from exc
    x = np.zeros(space.dimension)
    x[active] = xa
    r = np.linalg.norm(Aa @ xa - b[active]) / max(np.linalg.norm(b[active]), 1e-300)
    return CoarseSolution(coefficients=x, pressure=lift + P0 @ x, residual=float(r))


def solve_coarse(space: MultiscaleSpace, system: PressureSystem, tol: float = 1e-10) -> CoarseSolution:
    """Galerkin projection onto the space, with Dirichlet rows of the basis set to zero."""
    if space.dimension == 0:
        raise ConfigurationError("empty multiscale space")
    P0 = _dirichlet_free_basis(space, system)
    lift = system.lifting
    b = P0.T @ (system.load - system.A @ lift)
    Ac = sp.csr_matrix(P0.T @ (system.A @ P0))
    if space.dimension > DENSE_LIMIT:
        return _solve_coarse_sparse(space, Ac, b, lift, P0, tol)
    Ac = Ac.toarray()
    Ac = 0.5 * (Ac + Ac.T)
    # columns living only on Dirichlet nodes carry no unknowns
    active = np.flatnonzero(np.diag(Ac) > 0)
    if len(active) == 0:
        raise RankDeficiencyError("every basis column vanishes after Dirichlet elimination", range(space.dimension))
    Aa, ba = Ac[np.ix_(active, active)], b[active]
    try:
        factor = sla.cho_factor(Aa)
    except np.linalg.LinAlgError:
        cols = active[_near_dependent(Aa)].tolist()
        raise RankDeficiencyError(f"coarse matrix is singular; near-dependent columns {cols}", cols)
    xa = sla.cho_solve(factor, ba)
    bn = np.linalg.norm(ba)
    res = np.inf
    for _ in range(4):
        r = ba - Aa @ xa
        res = np.linalg.norm(r) / bn if bn > 0 else np.linalg.norm(r)
        if res <= tol:
            break
        xa = xa + sla.cho_solve(factor, r)
    if res > tol:
        cols = active[_near_dependent(Aa, 1e-12)].tolist()
        if cols:
            raise RankDeficiencyError(f"coarse matrix is nearly singular; near-dependent columns {cols}", cols)
        raise SolverError(f"coarse solve residual {res:.3e} > {tol:.1e}", res)
    x = np.zeros(space.dimension)
    x[active] = xa
    p = lift + P0 @ x
    return CoarseSolution(coefficients=x, pressure=p, residual=float(res))
