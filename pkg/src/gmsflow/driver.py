"""Single-phase enrichment studies and the IMPES two-phase loop."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .fem import BoundaryConditions, assemble_system, solve_system
from .flux import MODES, FluxPostprocessor, velocity_error
from .mesh import build_grid_hierarchy
from .msspace import MultiscaleSpace, build_offline_space, prepare_offline, solve_coarse
from .online import online_sweeps
from .permeability import field_hash
from .transport import SaturationState, TwoPhaseFunctions, initial_state, inflow_saturation, step

log = logging.getLogger(__name__)


def parse_basis(spec) -> tuple:
    """``"a+b"`` -> (a, b); a bare ``"a"`` means no online sweeps."""
    s = str(spec).replace(" ", "")
    parts = s.split("+")
    try:
        if len(parts) == 1:
            a, b = int(parts[0]), 0
        elif len(parts) == 2:
            a, b = int(parts[0]), int(parts[1])
        else:
            raise ValueError
    except ValueError:
        raise ConfigurationError(f"basis spec {spec!r} is not of the form 'a+b'") from None
    if a < 1 or b < 0:
        raise ConfigurationError(f"basis spec {spec!r} needs a >= 1 and b >= 0")
    return a, b


@dataclass
class ExperimentConfig:
    nx: int = 100
    ny: int = 100
    Nx: int = 10
    Ny: int = 10
    lx: float = 1.0
    ly: float = 1.0
    basis: str = "2+1"
    p_left: float = 1.0
    p_right: float = 0.0
    g_n: float = 0.0
    q: float = 0.0  # total source density
    q_w: float = None  # water source density; None splits q by fractional flow
    mu_w: float = 1.0
    mu_o: float = 5.0
    nw: float = 2.0
    no: float = 2.0
    n_steps: int = 400
    horizon: float = None  # None: pvi pore volumes at the initial single-phase rate
    pvi: float = 0.5
    pressure_every: int = 1
    snapshot_steps: tuple = ()
    cfl: float = 0.9
    adaptive_cfl: bool = True
    mode: str = "fine"
    tol: float = 1e-10
    seed: int = 0
    enrich_every: int = 0  # >0 re-enriches during two-phase runs
    out: str = None

    def __post_init__(self):
        parse_basis(self.basis)
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_steps < 1 or self.pressure_every < 1:
            raise ConfigurationError("n_steps and pressure_every must be >= 1")
        if self.tol <= 0 or self.cfl <= 0:
            raise ConfigurationError("tol and cfl must be positive")
        self.snapshot_steps = tuple(int(s) for s in self.snapshot_steps) or self.default_snapshots(self.n_steps)
        if any(s < 1 or s > self.n_steps for s in self.snapshot_steps):
            raise ConfigurationError("snapshot steps must lie in 1..n_steps")

    @staticmethod
    def default_snapshots(n: int) -> tuple:
        return tuple(sorted({max(1, n // 3), max(1, 2 * n // 3), n}))

    @property
    def offline(self) -> int:
        return parse_basis(self.basis)[0]

    @property
    def online(self) -> int:
        return parse_basis(self.basis)[1]

    @property
    def functions(self) -> TwoPhaseFunctions:
        return TwoPhaseFunctions(self.mu_w, self.mu_o, self.nw, self.no)

    def with_(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["snapshot_steps"] = list(self.snapshot_steps)
        return d

    @classmethod
    def from_mapping(cls, mapping) -> "ExperimentConfig":
        """Build from string values (config file); unknown keys are an error."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for key, raw in mapping.items():
            if key not in fields:
                raise ConfigurationError(f"unknown config key {key!r}")
            kw[key] = _convert(key, raw, fields[key].default)
        return cls(**kw)


def _convert(key, raw, default):
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    if key == "snapshot_steps":
        return tuple(int(x) for x in s.replace(",", " ").split())
    if s.lower() in ("none", ""):
        return None
    if isinstance(default, bool):
        if s.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")
        return s.lower() in ("true", "1", "yes")
    try:
        if isinstance(default, int):
            return int(s)
        if isinstance(default, float) or default is None and key in ("q_w", "horizon"):
            return float(s)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r}") from None
    return s


@dataclass
class RunReport:
    """Errors, diagnostics and provenance of one run.  Timings are kept apart."""

    kind: str
    provenance: dict
    metrics: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)  # name -> (header, rows)
    timings: dict = field(default_factory=dict)
    passed: bool = True

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "provenance": self.provenance,
            "metrics": self.metrics,
            "tables": {k: {"header": list(h), "rows": [list(r) for r in rows]} for k, (h, rows) in self.tables.items()},
            "passed": self.passed,
        }

    def to_text(self) -> str:
        lines = [f"# {self.kind} report"]
        for k, v in sorted(self.provenance.items()):
            lines.append(f"# {k}: {v}")
        lines.append(f"passed: {self.passed}")
        for k, v in sorted(self.metrics.items()):
            lines.append(f"{k}: {_fmt(v)}")
        for name, (header, rows) in self.tables.items():
            lines.append("")
            lines.append(f"[{name}]")
            lines.append("\t".join(header))
            lines.extend("\t".join(_fmt(x) for x in row) for row in rows)
        return "\n".join(lines) + "\n"

    def save(self, directory, stem: str = "report") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{stem}.txt").write_text(self.to_text())
        (d / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
        if self.timings:
            (d / f"{stem}_timings.json").write_text(json.dumps(self.timings, indent=1, sort_keys=True) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def relative_l2(u, ref, weight=None) -> float:
    u, ref = np.asarray(u, float).ravel(), np.asarray(ref, float).ravel()
    w = np.ones_like(ref) if weight is None else np.asarray(weight, float).ravel()
    den = math.sqrt(float(w @ (ref * ref)))
    num = math.sqrt(float(w @ ((u - ref) ** 2)))
    return num / den if den > 0 else num


def matrix_hash(m) -> str:
    m = m.tocsc()
    h = hashlib.sha256()
    for a in (m.data, m.indices, m.indptr):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


class Experiment:
    """Grid hierarchy, boundary data and offline build shared by the runs on one field."""

    def __init__(self, config: ExperimentConfig, kappa):
        t0 = time.perf_counter()
        self.config = config
        c = config
        self.kappa = np.asarray(kappa, dtype=float).ravel()
        if self.kappa.size != c.nx * c.ny:
            raise ConfigurationError(f"permeability has {self.kappa.size} cells, grid needs {c.nx}x{c.ny}")
        self.hierarchy = build_grid_hierarchy(c.nx, c.ny, c.Nx, c.Ny, c.lx, c.ly)
        self.bc = BoundaryConditions.left_right_drive(c.p_left, c.p_right, c.g_n)
        self.q = np.full(self.hierarchy.fine.n_cells, float(c.q))
        # basis construction always uses unit mobility
        self.offline_build = prepare_offline(self.hierarchy, self.kappa)
        self.post = FluxPostprocessor(self.hierarchy, self.offline_build.pou, self.bc)
        self.system0 = assemble_system(self.hierarchy.fine, self.kappa, self.q, self.bc)
        self._reference0 = None
        self.setup_time = time.perf_counter() - t0

    @property
    def pou(self):
        return self.offline_build.pou

    @property
    def reference_pressure(self) -> np.ndarray:
        if self._reference0 is None:
            self._reference0 = solve_system(self.system0, self.config.tol)
        return self._reference0

    def provenance(self, basis: str = None) -> dict:
        c = self.config
        return {
            "field_hash": field_hash(self.kappa),
            "grid": f"{c.nx}x{c.ny}/{c.Nx}x{c.Ny}",
            "L_z": basis or c.basis,
            "tol": repr(c.tol),
            "mode": c.mode,
            "seed": c.seed,
        }

    def offline_space(self, a: int) -> MultiscaleSpace:
        b = self.offline_build
        return build_offline_space(self.hierarchy, b.snapshots, b.spectral, b.pou, a)

    def space(self, basis: str, system=None, track: bool = True):
        """Offline space plus online sweeps; returns ``(space, records, energy errors)``."""
        a, b = parse_basis(basis)
        system = system or self.system0
        space = self.offline_space(a)
        ref = self.reference_pressure if track and system is self.system0 else None
        return online_sweeps(space, system, b, self.config.tol, reference=ref)

    def full_space(self) -> MultiscaleSpace:
        return MultiscaleSpace.full(self.hierarchy, self.pou)

    def injection_rate(self) -> float:
        """Total inflow of the unit-mobility reference solution."""
        res = self.post.postprocess(self.reference_pressure, self.kappa, self.q, "coarse")
        return float(-np.minimum(res.coarse.boundary, 0.0).sum())

    def horizon(self) -> float:
        c = self.config
        if c.horizon is not None:
            return float(c.horizon)
        rate = self.injection_rate()
        if rate <= 0:
            raise ConfigurationError("no inflow; set an explicit horizon")
        return c.pvi * c.lx * c.ly / rate


def run_single_phase(config: ExperimentConfig, kappa, experiment: Experiment = None) -> RunReport:
    """Unit-mobility pressure in the ``a+b`` space, postprocessed and compared with the fine reference."""
    timings = {}
    t0 = time.perf_counter()
    exp = experiment or Experiment(config, kappa)
    timings["setup"] = exp.setup_time if experiment is None else 0.0
    c = config
    t = time.perf_counter()
    space, records, energies = exp.space(c.basis)
    timings["space"] = time.perf_counter() - t
    t = time.perf_counter()
    sol = solve_coarse(space, exp.system0, c.tol)
    p_ref = exp.reference_pressure
    res = exp.post.postprocess(sol.pressure, exp.kappa, exp.q, c.mode)
    ref = exp.post.postprocess(p_ref, exp.kappa, exp.q, c.mode)
    timings["solve_and_postprocess"] = time.perf_counter() - t
    e = p_ref - sol.pressure
    energy_ref = exp.system0.energy(p_ref) or 1.0
    audit = res.audit()
    riesz = [float(r.riesz_defects.max()) for r in records if len(r.bases)]
    monotone = all(b <= a * (1 + 1e-12) + 1e-300 for a, b in zip(energies, energies[1:]))
    m = {
        "pressure_error": relative_l2(sol.pressure, p_ref),
        "velocity_error": velocity_error(res, ref),
        "energy_error": math.sqrt(max(exp.system0.energy(e), 0.0) / energy_ref),
        "dimension": int(space.dimension),
        "offline_dimension": int(space.offline_count),
        "coarse_defect": audit["coarse"],
        "fine_defect": audit.get("fine", 0.0),
        "riesz_max_defect": max(riesz) if riesz else 0.0,
        "energy_monotone": bool(monotone),
        "Lambda": float(exp.offline_build.spectral.Lambda),
    }
    rows = []
    for s, rec in enumerate(records, start=1):
        first = rec.reports[0] if rec.reports else None
        rows.append(
            [
                s,
                len(rec.batches),
                len(rec.bases),
                first.aggregate if first else 0.0,
                max(first.norms.values()) if first and first.norms else 0.0,
                energies[s] if s < len(energies) else float("nan"),
            ]
        )
    tables = {}
    if rows:
        tables["online_sweeps"] = (("sweep", "batches", "added", "residual_l2", "residual_max", "energy_after"), rows)
    if energies:
        tables["energy_history"] = (("level", "energy_error_sq"), [[i, v] for i, v in enumerate(energies)])
    timings["total"] = time.perf_counter() - t0
    rep = RunReport("single-phase", exp.provenance(c.basis), m, tables, timings)
    rep.passed = bool(monotone) and audit["coarse"] <= 1e-10 and audit.get("fine", 0.0) <= 1e-10
    if c.out:
        rep.save(c.out)
        space.save(c.out)
        res.field.save(Path(c.out) / "fluxes.txt")
    return rep


def pressure_update_substepping(config: ExperimentConfig) -> list:
    """Step indices at which pressure and fluxes are recomputed."""
    return list(range(0, config.n_steps, config.pressure_every))


def cell_mobility(exp: Experiment, S: np.ndarray, mode: str, functions: TwoPhaseFunctions) -> np.ndarray:
    """Per fine cell mobility from the control-volume saturations."""
    h = exp.hierarchy
    f, c = h.fine, h.coarse
    if mode == "fine":
        return functions.mobility(S[f.cell_nodes].mean(axis=1))
    ij = f.cell_ij
    I = (2 * ij[:, 0] + 1 + c.rx) // (2 * c.rx)
    J = (2 * ij[:, 1] + 1 + c.ry) // (2 * c.ry)
    return functions.mobility(S[c.node_id(I, J)])


@dataclass
class Trajectory:
    times: list
    saturations: dict  # step -> S
    pressures: dict  # step -> fine nodal pressure used for the last flux update before it
    fluxes: dict  # step -> interface fluxes of that flux update
    measure: np.ndarray
    min_S: float
    max_S: float
    max_balance: float  # max per-step defect / injected mass
    substeps: int
    basis_hash: str
    basis_hash_end: str
    pressure_solves: int


def simulate(exp: Experiment, pressure_fn, space=None, enrich_fn=None) -> Trajectory:
    """IMPES loop shared by multiscale and reference runs.

    ``pressure_fn(system)`` returns fine nodal pressure for the current
    coefficient; everything else is common code.
    """
    c = exp.config
    fun = c.functions
    h = exp.hierarchy
    tgrid = h.fine if c.mode == "fine" else h.coarse
    state = initial_state(tgrid)
    inflow_S = inflow_saturation(tgrid)
    T = exp.horizon()
    dt = T / c.n_steps
    updates = set(pressure_update_substepping(c))
    snaps = set(c.snapshot_steps)
    sat, pres, flx = {}, {}, {}
    lo, hi, bal, nsub, solves = 1.0, 0.0, 0.0, 0, 0
    h0 = matrix_hash(space.basis) if space is not None else ""
    field_ = p = None
    for n in range(c.n_steps):
        if n in updates:
            if enrich_fn is not None and c.enrich_every and n > 0 and n % c.enrich_every == 0:
                enrich_fn(state)
            coef = exp.kappa * cell_mobility(exp, state.S, c.mode, fun)
            system = assemble_system(h.fine, coef, exp.q, exp.bc)
            p = pressure_fn(system)
            solves += 1
            field_ = exp.post.postprocess(p, coef, exp.q, c.mode).field
            qw = None if c.q_w is None else field_.measure * c.q_w
        state, rec = step(state, field_, dt, fun, inflow_S, qw, c.cfl, c.adaptive_cfl)
        nsub += rec.substeps
        injected = rec.inflow + max(rec.sources, 0.0)
        if injected > 0:
            bal = max(bal, rec.balance_defect / injected)
        lo, hi = min(lo, float(state.S.min())), max(hi, float(state.S.max()))
        if state.step in snaps:
            sat[state.step] = state.S.copy()
            pres[state.step] = p.copy()
            flx[state.step] = field_.interface.copy()
    h1 = matrix_hash(space.basis) if space is not None else ""
    times = [s * dt for s in sorted(snaps)]
    return Trajectory(times, sat, pres, flx, field_.measure, lo, hi, bal, nsub, h0, h1, solves)


def reference_trajectory(exp: Experiment) -> Trajectory:
    tol = exp.config.tol
    return simulate(exp, lambda system: solve_system(system, tol))


def multiscale_trajectory(exp: Experiment, basis: str = None) -> tuple:
    c = exp.config
    space, records, _ = exp.space(basis or c.basis)
    holder = {"space": space}

    def pressure(system):
        return solve_coarse(holder["space"], system, c.tol).pressure

    def reenrich(state):
        coef = exp.kappa * cell_mobility(exp, state.S, c.mode, c.functions)
        system = assemble_system(exp.hierarchy.fine, coef, exp.q, exp.bc)
        holder["space"], _, _ = online_sweeps(holder["space"], system, 1, c.tol)

    traj = simulate(exp, pressure, space, reenrich if c.enrich_every else None)
    return traj, space, records


def write_raster(path, values: np.ndarray, nx: int, ny: int) -> None:
    """Vertex field as (ny+1) rows of (nx+1) values, bottom row first."""
    grid = np.asarray(values).reshape(ny + 1, nx + 1)
    with open(path, "w") as fh:
        for row in grid:
            fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")


def run_two_phase(config: ExperimentConfig, kappa, experiment: Experiment = None, reference: Trajectory = None):
    """Two-phase run in the frozen ``a+b`` space compared with the fine reference loop.

    Returns ``(RunReport, Trajectory)``; pass ``reference`` to reuse a
    reference trajectory across runs on the same experiment.
    """
    timings = {}
    t0 = time.perf_counter()
    exp = experiment or Experiment(config, kappa)
    c = config
    t = time.perf_counter()
    ref = reference or reference_trajectory(exp)
    timings["reference"] = time.perf_counter() - t
    t = time.perf_counter()
    traj, space, _ = multiscale_trajectory(exp, c.basis)
    timings["multiscale"] = time.perf_counter() - t
    rows = []
    worst = 0.0
    for step_, tt in zip(sorted(c.snapshot_steps), traj.times):
        es = relative_l2(traj.saturations[step_], ref.saturations[step_], traj.measure)
        ep = relative_l2(traj.pressures[step_], ref.pressures[step_])
        ev = relative_l2(traj.fluxes[step_], ref.fluxes[step_])
        rows.append([step_, tt, es, ep, ev])
        worst = max(worst, es)
    m = {
        "saturation_min": traj.min_S,
        "saturation_max": traj.max_S,
        "mass_balance_max": traj.max_balance,
        "substeps": traj.substeps,
        "pressure_solves": traj.pressure_solves,
        "basis_frozen": traj.basis_hash == traj.basis_hash_end,
        "dimension": int(space.dimension),
        "horizon": traj.times[-1] if traj.times else 0.0,
        "saturation_error_max": worst,
    }
    rep = RunReport("two-phase", exp.provenance(c.basis), m, {"errors": (("step", "time", "saturation", "pressure", "velocity"), rows)}, timings)
    rep.passed = bool(
        traj.min_S >= -1e-12 and traj.max_S <= 1 + 1e-12 and traj.max_balance <= 1e-10 and (m["basis_frozen"] or c.enrich_every)
    )
    timings["total"] = time.perf_counter() - t0
    if c.out:
        out = Path(c.out)
        rep.save(out)
        space.save(out)
        for s in sorted(c.snapshot_steps):
            write_raster(out / f"saturation_t{s:03d}.txt", traj.saturations[s], *_tgrid_shape(exp))
    return rep, traj


def _tgrid_shape(exp: Experiment) -> tuple:
    g = exp.hierarchy.fine if exp.config.mode == "fine" else exp.hierarchy.coarse
    return g.nx, g.ny


STUDY_BASES = ("1+0", "2+0", "5+0", "2+1", "2+2")


def enrich_study(config: ExperimentConfig, kappa, bases=STUDY_BASES, experiment: Experiment = None) -> RunReport:
    """Velocity, pressure and energy errors for several ``a+b`` choices on one field."""
    exp = experiment or Experiment(config, kappa)
    rows, timings = [], {}
    for b in bases:
        t = time.perf_counter()
        rep = run_single_phase(config.with_(basis=b, out=None), kappa, exp)
        timings[b] = time.perf_counter() - t
        m = rep.metrics
        rows.append([b, m["dimension"], m["velocity_error"], m["pressure_error"], m["energy_error"], m["energy_monotone"]])
    prov = exp.provenance(basis=",".join(bases))
    out = RunReport("enrich-study", prov, {}, {"study": (("L_z", "dim", "velocity", "pressure", "energy", "monotone"), rows)}, timings)
    if config.out:
        out.save(config.out)
    return out
