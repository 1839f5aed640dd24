"""Residual-driven online enrichment of a multiscale space.

The local test space of a neighborhood D_i is the set of fine finite element
functions vanishing on all of its boundary, i.e. the fine nodes strictly
inside the patch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError
from .fem import PressureSystem
from .linalg import SPDSolver
from .msspace import MultiscaleSpace, solve_coarse

log = logging.getLogger(__name__)

STRATEGIES = ("sweep", "topk", "threshold")
ZERO_RTOL = 1e-12


@dataclass
class ResidualReport:
    """Dual norms of the local residuals at one enrichment level."""

    level: int
    norms: dict  # coarse node -> norm

    @property
    def aggregate(self) -> float:
        return float(np.sqrt(sum(v * v for v in self.norms.values())))

    def records(self):
        return [(self.level, i, v) for i, v in sorted(self.norms.items())]


@dataclass(frozen=True)
class LocalResidual:
    node: int
    dofs: np.ndarray  # fine node ids of the local test space
    r: np.ndarray  # functional values on the local nodal basis
    norm: float


@dataclass(frozen=True)
class OnlineBasis:
    owner: int
    vector: np.ndarray  # fine nodal values
    energy: float  # ||phi||^2 in the local energy norm
    functional: float  # R_i(phi)


class _LocalSolvers:
    """Cached factorizations of the local energy matrices for one coefficient."""

    def __init__(self, space: MultiscaleSpace, system: PressureSystem, tol: float):
        self.space, self.system, self.tol = space, system, tol
        self._cache = {}

    def dofs(self, i: int) -> np.ndarray:
        nb = self.space.hierarchy.neighborhoods[i]
        return nb.nodes[nb.interior_local]

    def solver(self, i: int) -> SPDSolver:
        if i not in self._cache:
            d = self.dofs(i)
            self._cache[i] = SPDSolver(self.system.A[d][:, d], self.tol)
        return self._cache[i]


def _residual_vector(system: PressureSystem, p_H: np.ndarray) -> np.ndarray:
    return system.A @ p_H - system.load


def _zero_level(system: PressureSystem, p_H: np.ndarray) -> float:
    return ZERO_RTOL * (np.linalg.norm(abs(system.A) @ np.abs(p_H)) + np.linalg.norm(system.load))


def local_residual(space: MultiscaleSpace, p_H, i: int, system: PressureSystem, tol: float = 1e-10, _solvers=None):
    """Residual functional of neighborhood ``i`` and its dual norm sqrt(r^T K^-1 r)."""
    solvers = _solvers or _LocalSolvers(space, system, tol)
    d = solvers.dofs(i)
    if len(d) == 0:
        return LocalResidual(i, d, np.zeros(0), 0.0)
    r = _residual_vector(system, p_H)[d]
    phi = solvers.solver(i).solve(r)
    return LocalResidual(i, d, r, float(np.sqrt(max(r @ phi, 0.0))))


def solve_online_basis(res: LocalResidual, system: PressureSystem, tol: float = 1e-10, _solvers=None):
    """Riesz representer of the local residual; ``None`` when the residual vanishes."""
    if len(res.dofs) == 0 or not np.any(res.r):
        return None
    d = res.dofs
    if _solvers is not None:
        phi = _solvers.solver(res.node).solve(res.r)
    else:
        phi = SPDSolver(system.A[d][:, d], tol).solve(res.r)
    K = system.A[d][:, d]
    energy = float(phi @ (K @ phi))
    if energy <= 0:
        return None
    v = np.zeros(system.grid.n_nodes)
    v[d] = phi / np.abs(phi).max()
    return OnlineBasis(res.node, v, energy, float(res.r @ phi))


def select_batch(space: MultiscaleSpace, norms: dict, candidates=None, k=None, threshold=None) -> list:
    """Greedy pick by descending norm; no two picks share a coarse element."""
    hier = space.hierarchy
    nodes = sorted(norms if candidates is None else candidates, key=lambda i: (-norms[i], i))
    taken, picked = set(), []
    for i in nodes:
        if threshold is not None and norms[i] < threshold:
            break
        els = set(hier.neighborhoods[i].elements)
        if els & taken:
            continue
        picked.append(i)
        taken |= els
        if k is not None and len(picked) >= k:
            break
    return picked


@dataclass
class EnrichmentRecord:
    """What one call of :func:`enrich` did."""

    reports: list = field(default_factory=list)  # ResidualReport before every batch
    batches: list = field(default_factory=list)  # selected node lists
    bases: list = field(default_factory=list)  # OnlineBasis
    pressure: np.ndarray = None  # coarse solution in the enriched space

    @property
    def riesz_defects(self) -> np.ndarray:
        return np.array([abs(b.energy - b.functional) / b.energy for b in self.bases])


def enrich(
    space: MultiscaleSpace,
    system: PressureSystem,
    strategy: str = "sweep",
    k: int = None,
    theta: float = None,
    tol: float = 1e-10,
):
    """Add online basis functions and return ``(new_space, record)``.

    ``sweep`` processes non-overlapping batches until every coarse node was
    visited once, re-solving the coarse problem after each batch. ``topk``
    adds one batch of at most ``k`` functions; ``threshold`` one batch of the
    neighborhoods whose residual norm is at least ``theta`` times the largest.
    """
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown enrichment strategy {strategy!r}; choose from {STRATEGIES}")
    if strategy == "topk" and (k is None or k < 1):
        raise ConfigurationError("topk needs k >= 1")
    if strategy == "threshold" and (theta is None or not 0 <= theta <= 1):
        raise ConfigurationError("threshold needs 0 <= theta <= 1")
    solvers = _LocalSolvers(space, system, tol)
    rec = EnrichmentRecord()
    unvisited = set(range(len(space.hierarchy.neighborhoods)))
    current = space
    level0 = space.level
    p_H = solve_coarse(current, system, tol).pressure
    while unvisited:
        zero = _zero_level(system, p_H)
        res = {i: local_residual(current, p_H, i, system, tol, solvers) for i in sorted(unvisited)}
        norms = {i: r.norm for i, r in res.items()}
        rec.reports.append(ResidualReport(level0 + len(rec.batches), norms))
        active = [i for i in norms if norms[i] > zero]
        if not active:
            break
        if strategy == "sweep":
            batch = select_batch(current, norms, active)
        elif strategy == "topk":
            batch = select_batch(current, norms, active, k=k)
        else:
            batch = select_batch(current, norms, active, threshold=theta * max(norms[i] for i in active))
        new = [b for b in (solve_online_basis(res[i], system, tol, solvers) for i in batch) if b is not None]
        rec.batches.append(batch)
        rec.bases.extend(new)
        if new:
            current = current.with_online([b.vector for b in new], [b.owner for b in new])
            p_H = solve_coarse(current, system, tol).pressure
        log.debug("batch %d: %d functions", len(rec.batches), len(new))
        if strategy != "sweep":
            break
        unvisited -= set(batch)
    rec.pressure = p_H
    return replace(current, level=level0 + 1), rec


def online_sweeps(space: MultiscaleSpace, system: PressureSystem, n: int, tol: float = 1e-10, reference=None):
    """Run ``n`` full sweeps; returns the final space, the records and the energy errors.

    ``reference`` is the fine solution used to track the energy error before
    and after every sweep (empty list when omitted).
    """
    records, energies = [], []
    if reference is not None:
        e = reference - solve_coarse(space, system, tol).pressure
        energies.append(system.energy(e))
    for _ in range(n):
        space, rec = enrich(space, system, "sweep", tol=tol)
        records.append(rec)
        if reference is not None:
            e = reference - rec.pressure
            energies.append(system.energy(e))
    return space, records, energies
