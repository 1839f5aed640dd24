"""Linear algebra kernels: sparse SPD solves, pinned Neumann solves, dense generalized eigenproblems.

Sparse matrices are plain ``scipy.sparse`` CSR matrices; factorizations use SuperLU.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import CompatibilityError, ConfigurationError, SingularMatrixError, SolverError

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
PIVOT_RATIO = 1e-14
MASS_SHIFT = 1e-12
MAX_REFINE = 4


def finalize(matrix) -> sp.csr_matrix:
    """CSR copy with duplicates summed, explicit zeros dropped and sorted indices."""
    A = sp.csr_matrix(matrix, dtype=float)
    A.sum_duplicates()
    A.eliminate_zeros()
    A.sort_indices()
    return A


def _rel_residual(A, x, b):
    bn = np.linalg.norm(b)
    r = np.linalg.norm(A @ x - b)
    return r / bn if bn > 0 else r


class SPDSolver:
    """Sparse LU factorization of an SPD matrix, reusable for many right-hand sides."""

    def __init__(self, matrix, tol: float = DEFAULT_TOL):
        if tol <= 0:
            raise ConfigurationError("tol must be positive")
        A = sp.csc_matrix(matrix, dtype=float)
        if A.shape[0] != A.shape[1]:
            raise ConfigurationError(f"matrix must be square, got {A.shape}")
        self.matrix = A
        self.tol = tol
        n = A.shape[0]
        if n == 0:
            self._lu = None
            return
        scale = abs(A).max()
        rowsum = np.abs(np.asarray(A.sum(axis=1)).ravel())
        if n > 1 and scale > 0 and rowsum.max() <= 1e-12 * scale:
            raise SingularMatrixError("matrix has zero row sums (constants in its kernel); pin a node first")
        try:
            self._lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A")  # symmetric fill-reducing order
        except RuntimeError as exc:
            raise SingularMatrixError(f"factorization failed: {exc}") from exc
        d = np.abs(self._lu.U.diagonal())
        if d.min() <= PIVOT_RATIO * d.max():
            raise SingularMatrixError(f"numerically singular matrix (pivot ratio {d.min() / d.max():.2e})")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve with iterative refinement.

        Refinement continues past ``tol`` while it still reduces the residual
        noticeably, so conservation-sensitive callers get near machine accuracy.
        """
        b = np.asarray(rhs, dtype=float)
        if self._lu is None:
            return np.zeros_like(b)
        x = self._lu.solve(b)
        res = self._residuals(x, b).max()
        for _ in range(MAX_REFINE):
            if res <= 1e-15:
                break
            x_new = x + self._lu.solve(b - self.matrix @ x)
            res_new = self._residuals(x_new, b).max()
            if res_new >= 0.5 * res:
                if res_new < res:
                    x, res = x_new, res_new
                break
            x, res = x_new, res_new
        if res > self.tol:
            raise SolverError(f"solve reached relative residual {res:.3e} > {self.tol:.1e}", res)
        return x

    def _residuals(self, x, b):
        if b.ndim == 1:
            return np.array([_rel_residual(self.matrix, x, b)])
        r = np.linalg.norm(self.matrix @ x - b, axis=0)
        bn = np.linalg.norm(b, axis=0)
        return np.where(bn > 0, r / np.where(bn > 0, bn, 1.0), r)


def solve_spd(matrix, rhs, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Solve ``A x = b`` for sparse SPD ``A`` with ``||Ax - b|| <= tol ||b||``."""
    return SPDSolver(matrix, tol).solve(rhs)


def pin_matrix(matrix, pins) -> sp.csr_matrix:
    """Replace rows and columns ``pins`` by identity rows/columns."""
    A = sp.csr_matrix(matrix, dtype=float)
    keep = np.ones(A.shape[0])
    keep[np.asarray(pins)] = 0.0
    D = sp.diags(keep)
    return finalize(D @ A @ D + sp.diags(1.0 - keep))


def check_compatible(rhs, rtol: float = 1e-10, atol: float = 0.0) -> float:
    """Return the sum of ``rhs``; raise if it is not negligible against ``||rhs||_1``."""
    b = np.asarray(rhs, dtype=float)
    defect = float(b.sum())
    bound = rtol * np.abs(b).sum() + atol
    if abs(defect) > bound:
        raise CompatibilityError(f"incompatible Neumann data: sum(rhs) = {defect:.3e}", defect)
    return defect


def solve_neumann_pinned(matrix, rhs, pin: int = 0, tol: float = DEFAULT_TOL) -> np.ndarray:
    """One solution of a singular Neumann system whose kernel is the constants.

    The unknown at ``pin`` is fixed to zero; gradients of the result are unique.
    """
    b = np.array(rhs, dtype=float)
    check_compatible(b)
    b[pin] = 0.0
    return solve_spd(pin_matrix(matrix, [pin]), b, tol)


@dataclass(frozen=True)
class EigenResult:
    values: np.ndarray  # ascending
    vectors: np.ndarray  # columns, M-orthonormal
    shift: float  # diagonal shift applied to M


def eig_sym_generalized(A, M, eps: float = MASS_SHIFT) -> EigenResult:
    """Solve ``A v = lam M v`` for symmetric ``A`` and symmetric PSD ``M``.

    ``M`` is shifted by ``eps * trace(M) / m`` so that semi-definite mass
    matrices can be factorized.
    """
    A = np.asarray(A, dtype=float)
    M = np.asarray(M, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape != M.shape:
        raise ConfigurationError(f"dimension mismatch: A {A.shape}, M {M.shape}")
    m = A.shape[0]
    if m == 0:
        raise ConfigurationError("empty eigenproblem")
    A = 0.5 * (A + A.T)
    M = 0.5 * (M + M.T)
    shift = eps * np.trace(M) / m
    if shift <= 0:
        shift = eps
    Ms = M + shift * np.eye(m)
    try:
        values, vectors = sla.eigh(A, Ms)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"generalized eigenproblem failed: {exc}") from exc
    if shift > 0:
        log.debug("mass matrix shifted by %.3e", shift)
    return EigenResult(values=values, vectors=vectors, shift=float(shift))
