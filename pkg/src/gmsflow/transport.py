"""Explicit upwind finite-volume transport of water saturation on a dual mesh."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import CFLError, ConfigurationError
from .flux import ConservativeFluxField
from .mesh import INTERFACES

log = logging.getLogger(__name__)

DEFAULT_CFL = 0.9


@dataclass(frozen=True)
class TwoPhaseFunctions:
    """Corey-type relative permeabilities k_rw = S^nw, k_ro = (1-S)^no and viscosities."""

    mu_w: float = 1.0
    mu_o: float = 5.0
    nw: float = 2.0
    no: float = 2.0

    def __post_init__(self):
        if self.mu_w <= 0 or self.mu_o <= 0:
            raise ConfigurationError("viscosities must be positive")
        if self.nw < 1 or self.no < 1:
            raise ConfigurationError("relative permeability exponents must be >= 1")

    @staticmethod
    def _clip(S):
        S = np.asarray(S, dtype=float)
        if np.any(S < -1e-9) or np.any(S > 1 + 1e-9):
            log.warning("saturation outside [0, 1] clamped (range %.3e .. %.3e)", S.min(), S.max())
        return np.clip(S, 0.0, 1.0)

    def krw(self, S):
        return self._clip(S) ** self.nw

    def kro(self, S):
        return (1.0 - self._clip(S)) ** self.no

    def mobility(self, S):
        return self.krw(S) / self.mu_w + self.kro(S) / self.mu_o

    def frac_flow(self, S):
        return (self.krw(S) / self.mu_w) / self.mobility(S)

    def frac_flow_unchecked(self, S):
        """f(S) with silent clamping, for inner loops."""
        S = np.clip(S, 0.0, 1.0)
        w = S**self.nw / self.mu_w
        return w / (w + (1.0 - S) ** self.no / self.mu_o)

    @cached_property
    def fprime_max(self) -> float:
        """max of f' on [0, 1], from a dense central-difference sample."""
        S = np.linspace(0.0, 1.0, 200001)
        return float(np.abs(np.gradient(self.frac_flow(S), S)).max())


def mobility(S, functions: TwoPhaseFunctions = TwoPhaseFunctions()):
    return functions.mobility(S)


def frac_flow(S, functions: TwoPhaseFunctions = TwoPhaseFunctions()):
    return functions.frac_flow(S)


@dataclass(frozen=True)
class SaturationState:
    S: np.ndarray  # per control volume
    t: float = 0.0
    step: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.S)):
            raise ConfigurationError("saturation must be finite")


@dataclass(frozen=True)
class StepRecord:
    dt: float
    substeps: int
    stored: float  # sum meas * (S_new - S_old)
    inflow: float  # water entering through the boundary (mass)
    outflow: float
    sources: float

    @property
    def balance_defect(self) -> float:
        return abs(self.stored - (self.inflow - self.outflow + self.sources))


def _outflow_rates(field_: ConservativeFluxField, sources=None) -> np.ndarray:
    g = field_.grid
    cn = g.cell_nodes
    out = np.zeros(g.n_nodes)
    for k, (a, b) in enumerate(INTERFACES):
        F = field_.interface[:, k]
        np.add.at(out, cn[:, a], np.maximum(F, 0.0))
        np.add.at(out, cn[:, b], np.maximum(-F, 0.0))
    out += np.maximum(field_.boundary, 0.0)
    if sources is not None:
        out += np.maximum(-sources, 0.0)
    return out


def cfl_bound(field_: ConservativeFluxField, functions: TwoPhaseFunctions, cfl: float = DEFAULT_CFL, sources=None):
    """Largest stable explicit step; ``inf`` without any outflow."""
    out = _outflow_rates(field_, sources)
    m = field_.measure
    pos = out > 0
    if not np.any(pos):
        return math.inf
    return float(cfl * np.min(m[pos] / out[pos]) / functions.fprime_max)


class _Operator:
    """Water balance of one flux field, linear in f(S): dW = G f(S) + c.

    Built once per step so that substeps only cost one sparse product.
    """

    def __init__(self, field_: ConservativeFluxField, functions, inflow_S, q_w):
        g = field_.grid
        n = g.n_nodes
        cn = g.cell_nodes
        ia = np.concatenate([cn[:, a] for a, _ in INTERFACES])
        ib = np.concatenate([cn[:, b] for _, b in INTERFACES])
        F = field_.interface.T.ravel()
        Fp, Fn = np.maximum(F, 0.0), np.minimum(F, 0.0)
        # water a -> b is Fp f(S_a) + Fn f(S_b)
        rows = np.concatenate([ib, ib, ia, ia])
        cols = np.concatenate([ia, ib, ia, ib])
        vals = np.concatenate([Fp, Fn, -Fp, -Fn])
        B = field_.boundary
        self.out_rate = np.maximum(B, 0.0)
        self.in_water = np.maximum(-B, 0.0) * functions.frac_flow(inflow_S)
        if q_w is not None:
            self.src_const = np.asarray(q_w, dtype=float) * np.ones(n)
            self.src_diag = np.zeros(n)
        else:
            q = field_.source
            self.src_const = np.where(q > 0, q * functions.frac_flow(inflow_S), 0.0)
            self.src_diag = np.minimum(q, 0.0)
        diag = self.src_diag - self.out_rate
        self.G = sp.csr_matrix(
            (np.concatenate([vals, diag]), (np.concatenate([rows, np.arange(n)]), np.concatenate([cols, np.arange(n)]))),
            shape=(n, n),
        )
        self.c = self.in_water + self.src_const
        self.inv_measure = 1.0 / field_.measure

    def substep(self, S, dt, frac):
        fS = frac(S)
        S_new = S + dt * (self.G @ fS + self.c) * self.inv_measure
        out = dt * float(self.out_rate @ fS)
        src = dt * float(self.src_const.sum() + self.src_diag @ fS)
        return S_new, dt * float(self.in_water.sum()), out, src


def _water_sources(field_: ConservativeFluxField, S, functions, q_w, inject_S):
    """Water source per volume: explicit ``q_w`` or the total source split by f."""
    if q_w is not None:
        return np.asarray(q_w, dtype=float)
    q = field_.source
    return np.where(q > 0, q * functions.frac_flow(inject_S), q * functions.frac_flow(S))


def _substep(S, field_, dt, functions, inflow_S, q_w):
    """Plain per-interface update; reference for :class:`_Operator`."""
    g = field_.grid
    cn = g.cell_nodes
    fS = functions.frac_flow(S)
    ia = cn[:, [a for a, _ in INTERFACES]].ravel()
    ib = cn[:, [b for _, b in INTERFACES]].ravel()
    F = field_.interface.ravel()
    w = np.where(F > 0, F * fS[ia], F * fS[ib])  # water moving a -> b
    n = len(S)
    dW = np.bincount(ib, w, n) - np.bincount(ia, w, n)
    B = field_.boundary
    f_in = functions.frac_flow(inflow_S)
    out_w = np.where(B > 0, B * fS, 0.0)
    in_w = np.where(B < 0, -B * f_in, 0.0)
    src = _water_sources(field_, S, functions, q_w, inflow_S)
    dW += in_w - out_w + src
    S_new = S + dt * dW / field_.measure
    return S_new, dt * in_w.sum(), dt * out_w.sum(), dt * src.sum()


def step(
    state: SaturationState,
    field_: ConservativeFluxField,
    dt: float,
    functions: TwoPhaseFunctions = TwoPhaseFunctions(),
    inflow_S=1.0,
    q_w=None,
    cfl: float = DEFAULT_CFL,
    adaptive: bool = False,
):
    """Advance the saturation by ``dt`` with donor-cell upwinding.

    ``inflow_S`` is the saturation carried by boundary inflow (scalar or per
    volume).  With ``adaptive`` the step is split into equal substeps that
    satisfy the CFL bound; otherwise a too large ``dt`` raises
    :class:`CFLError`.  Returns ``(new_state, StepRecord)``.
    """
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    S = np.asarray(state.S, dtype=float)
    inflow_S = np.broadcast_to(np.asarray(inflow_S, dtype=float), S.shape)
    bound = cfl_bound(field_, functions, cfl, None if q_w is None else np.asarray(q_w))
    if field_.source.any() and q_w is None:
        bound = min(bound, cfl_bound(field_, functions, cfl, field_.source))
    n = 1
    if dt > bound * (1 + 1e-12):
        if not adaptive:
            raise CFLError(f"dt={dt:.3e} exceeds the CFL bound {bound:.3e}", bound)
        n = math.ceil(dt / bound)
    h = dt / n
    S0 = S
    op = _Operator(field_, functions, inflow_S, q_w)
    frac = functions.frac_flow_unchecked
    tin = tout = tsrc = 0.0
    for _ in range(n):
        S, a, b, c = op.substep(S, h, frac)
        tin, tout, tsrc = tin + a, tout + b, tsrc + c
    functions._clip(S)  # warn once per step if the update left [0, 1]
    stored = float(field_.measure @ (S - S0))
    rec = StepRecord(dt, n, stored, tin, tout, tsrc)
    return SaturationState(S, state.t + dt, state.step + 1), rec


def inflow_saturation(grid, side: str = "left", value: float = 1.0) -> np.ndarray:
    """Per-vertex injected saturation: ``value`` on ``side``, 0 elsewhere."""
    s = np.zeros(grid.n_nodes)
    s[grid.side_nodes(side)] = value
    return s


def initial_state(grid, side: str = "left", value: float = 1.0) -> SaturationState:
    """Dry domain with the injection side already flooded."""
    return SaturationState(inflow_saturation(grid, side, value))
