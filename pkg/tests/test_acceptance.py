"""Acceptance criteria, each at its stated tolerance and runtime budget."""
import time

import numpy as np
import pytest

from gmsflow.driver import (
    Experiment,
    ExperimentConfig,
    reference_trajectory,
    run_single_phase,
    run_two_phase,
)
from gmsflow.fem import BoundaryConditions, assemble_system, solve_system
from gmsflow.mesh import build_grid_hierarchy
from gmsflow.fem import build_partition_of_unity
from gmsflow.msspace import MultiscaleSpace, solve_coarse
from gmsflow.permeability import bundled_field, gen_perm

from oracles import dense_dirichlet_solve, dense_stiffness, left_right_nodes


def test_criterion_1_exactness(verdict):
    t0 = time.perf_counter()
    cfg = ExperimentConfig(nx=40, ny=40, Nx=4, Ny=4, basis="1+0")
    rep = run_single_phase(cfg, np.ones(1600))
    dt = time.perf_counter() - t0
    ep, ev = rep.metrics["pressure_error"], rep.metrics["velocity_error"]
    ok = ep <= 1e-8 and ev <= 1e-8 and dt < 5.0
    assert verdict(1, ok, f"pressure {ep:.2e} velocity {ev:.2e} (<= 1e-8), {dt:.1f} s (< 5 s)")


def test_criterion_2_oracle_equivalence(verdict):
    worst_dense = worst_identity = 0.0
    for seed, n in enumerate((6, 8, 10, 12)):
        rng = np.random.default_rng(seed)
        kappa = 10 ** rng.uniform(0, 4, n * n)
        h = build_grid_hierarchy(n, n, 2, 2)
        bc = BoundaryConditions.left_right_drive(1.0, 0.0)
        system = assemble_system(h.fine, kappa, None, bc)
        p = solve_system(system, 1e-12)
        nodes, vals = left_right_nodes(n, n)
        ref = dense_dirichlet_solve(dense_stiffness(n, n, kappa), np.zeros((n + 1) ** 2), nodes, vals)
        worst_dense = max(worst_dense, np.linalg.norm(p - ref) / np.linalg.norm(ref))
        full = MultiscaleSpace.full(h, build_partition_of_unity(h, kappa))
        pc = solve_coarse(full, system, 1e-12).pressure
        worst_identity = max(worst_identity, np.linalg.norm(pc - p) / np.linalg.norm(p))
    ok = worst_dense <= 1e-9 and worst_identity <= 1e-10
    assert verdict(2, ok, f"dense oracle {worst_dense:.2e} (<= 1e-9), identity prolongation {worst_identity:.2e} (<= 1e-10)")


def test_criterion_3_local_conservation(verdict):
    worst = 0.0
    details = []
    for kind in ("inclusions", "channels", "fractures"):
        kappa = gen_perm(kind, 100, 100, 1e5, seed=0).cells
        exp = Experiment(ExperimentConfig(basis="2+0"), kappa)
        p = solve_coarse(exp.offline_space(2), exp.system0).pressure
        for mode in ("coarse", "fine"):
            audit = exp.post.postprocess(p, kappa, exp.q, mode).audit()
            w = max(audit.values())
            worst = max(worst, w)
            details.append(f"{kind}/{mode} {w:.1e}")
    assert verdict(3, worst <= 1e-10, f"max relative defect {worst:.2e} (<= 1e-10): " + ", ".join(details))


@pytest.fixture(scope="module")
def bundled_study():
    kappa = bundled_field().cells
    cfg = ExperimentConfig(mode="fine")
    t0 = time.perf_counter()
    exp = Experiment(cfg, kappa)
    reps = {b: run_single_phase(cfg.with_(basis=b), kappa, exp) for b in ("1+0", "5+0", "2+1")}
    return reps, time.perf_counter() - t0, exp


def test_criterion_4_enrichment_pattern(bundled_study, verdict):
    reps, dt, _ = bundled_study
    e = {b: r.metrics["velocity_error"] for b, r in reps.items()}
    monotone = all(r.metrics["energy_monotone"] for r in reps.values())
    ok = e["1+0"] >= 3 * e["5+0"] and e["2+1"] <= 1.1 * e["5+0"] and monotone and dt < 120
    assert verdict(
        4,
        ok,
        f"velocity 1+0 {e['1+0']:.3f}, 5+0 {e['5+0']:.3f}, 2+1 {e['2+1']:.3f}; "
        f"ratio {e['1+0'] / e['5+0']:.1f} (>= 3), energy monotone {monotone}, {dt:.0f} s (< 120 s)",
    )


def test_criterion_5_riesz_identity(bundled_study, verdict):
    _, _, exp = bundled_study
    _, records, _ = exp.space("2+2")
    defects = np.concatenate([r.riesz_defects for r in records if len(r.bases)])
    worst = float(defects.max())
    assert verdict(5, worst <= 1e-8, f"{len(defects)} online functions, max relative defect {worst:.2e} (<= 1e-8)")


def test_criterion_6_transport(verdict):
    t0 = time.perf_counter()
    kappa = bundled_field().cells
    cfg = ExperimentConfig(mode="fine", n_steps=400)
    exp = Experiment(cfg, kappa)
    ref = reference_trajectory(exp)
    runs = {b: run_two_phase(cfg.with_(basis=b), kappa, exp, ref)[0] for b in ("1+0", "2+1")}
    dt = time.perf_counter() - t0
    lo = min(r.metrics["saturation_min"] for r in runs.values())
    hi = max(r.metrics["saturation_max"] for r in runs.values())
    bal = max(r.metrics["mass_balance_max"] for r in runs.values())
    e1 = [row[2] for row in runs["1+0"].tables["errors"][1]]
    e2 = [row[2] for row in runs["2+1"].tables["errors"][1]]
    below = all(b <= a for a, b in zip(e1, e2))
    ok = lo >= -1e-12 and hi <= 1 + 1e-12 and bal <= 1e-10 and below and dt < 600
    assert verdict(
        6,
        ok,
        f"S in [{lo:.1e}, {hi:.6f}], balance {bal:.1e} (<= 1e-10), "
        f"saturation error 2+1 {[f'{x:.3f}' for x in e2]} vs 1+0 {[f'{x:.3f}' for x in e1]}, {dt:.0f} s (< 600 s)",
    )


def test_criterion_7_determinism(tmp_path, verdict):
    kappa = bundled_field().cells
    cfg = ExperimentConfig(n_steps=12, basis="2+1", seed=7)
    for d in ("a", "b"):
        run_two_phase(cfg.with_(out=str(tmp_path / d / "two")), kappa)
        run_single_phase(cfg.with_(out=str(tmp_path / d / "one")), kappa)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files = [f for f in files if "timings" not in f.name]
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    gen = gen_perm("channels", 100, 100, 1e4, 7).hash() == gen_perm("channels", 100, 100, 1e4, 7).hash()
    ok = all(same) and gen and len(files) >= 8
    assert verdict(7, ok, f"{sum(same)}/{len(files)} output files byte-identical, generator reproducible {gen}")
