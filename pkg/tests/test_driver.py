import numpy as np
import pytest

from gmsflow.driver import (
    Experiment,
    ExperimentConfig,
    cell_mobility,
    parse_basis,
    pressure_update_substepping,
    reference_trajectory,
    relative_l2,
    run_single_phase,
    run_two_phase,
    simulate,
)
from gmsflow.errors import ConfigurationError
from gmsflow.msspace import solve_coarse
from gmsflow.permeability import gen_perm
from gmsflow.transport import SaturationState, inflow_saturation, step

SMALL = ExperimentConfig(nx=20, ny=20, Nx=5, Ny=5, n_steps=12, basis="2+1")


def small_field(contrast=1e3, seed=4):
    return gen_perm("inclusions", 20, 20, contrast, seed).cells


@pytest.mark.parametrize("spec, out", [("2+1", (2, 1)), ("3", (3, 0)), (" 1 + 0 ", (1, 0)), (5, (5, 0))])
def test_parse_basis(spec, out):
    assert parse_basis(spec) == out


@pytest.mark.parametrize("spec", ["0+1", "1+-1", "a+b", "1+2+3", ""])
def test_parse_basis_rejects(spec):
    with pytest.raises(ConfigurationError):
        parse_basis(spec)


def test_config_validation_and_mapping():
    with pytest.raises(ConfigurationError):
        ExperimentConfig(mode="dual")
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_mapping({"nope": "1"})
    cfg = ExperimentConfig.from_mapping({"nx": "20", "tol": "1e-9", "basis": "1+0", "snapshot_steps": "2 4"})
    assert cfg.nx == 20 and cfg.tol == 1e-9 and cfg.snapshot_steps == (2, 4)
    assert ExperimentConfig(n_steps=9).snapshot_steps == (3, 6, 9)


def test_substepping_schedule():
    assert pressure_update_substepping(SMALL) == list(range(12))
    assert pressure_update_substepping(SMALL.with_(pressure_every=5)) == [0, 5, 10]


def test_unit_field_single_phase_is_exact():
    rep = run_single_phase(SMALL.with_(basis="1+0"), np.ones(400))
    assert rep.metrics["pressure_error"] <= 1e-8
    assert rep.metrics["velocity_error"] <= 1e-8
    assert rep.passed


def test_b_zero_matches_offline_pipeline():
    kappa = small_field()
    cfg = SMALL.with_(basis="2+0")
    exp = Experiment(cfg, kappa)
    rep = run_single_phase(cfg, kappa, exp)
    p = solve_coarse(exp.offline_space(2), exp.system0).pressure
    assert rep.metrics["pressure_error"] == pytest.approx(relative_l2(p, exp.reference_pressure), rel=1e-12)


def test_flooded_state_is_a_fixed_point():
    kappa = small_field()
    exp = Experiment(SMALL, kappa)
    for mode in ("fine", "coarse"):
        S = np.ones(exp.hierarchy.fine.n_nodes if mode == "fine" else exp.hierarchy.coarse.n_nodes)
        assert np.allclose(cell_mobility(exp, S, mode, SMALL.functions), 1.0)
    g = exp.hierarchy.fine
    field_ = exp.post.postprocess(exp.reference_pressure, kappa, exp.q, "fine").field
    S = np.ones(g.n_nodes)
    new, _ = step(SaturationState(S), field_, 1e-4, inflow_S=inflow_saturation(g), adaptive=True)
    assert np.allclose(new.S, 1.0, atol=1e-12)


def test_identity_space_reproduces_reference():
    kappa = small_field()
    exp = Experiment(SMALL, kappa)
    full = exp.full_space()
    ref = reference_trajectory(exp)
    traj = simulate(exp, lambda system: solve_coarse(full, system, 1e-12).pressure, full)
    for s in SMALL.snapshot_steps:
        assert relative_l2(traj.saturations[s], ref.saturations[s]) <= 1e-8
        assert relative_l2(traj.pressures[s], ref.pressures[s]) <= 1e-8


def test_pressure_substepping_converges_on_homogeneous_field():
    cfg = SMALL.with_(n_steps=40, snapshot_steps=())
    kappa = np.ones(400)
    a = reference_trajectory(Experiment(cfg, kappa))
    b = reference_trajectory(Experiment(cfg.with_(pressure_every=10), kappa))
    assert b.pressure_solves == 4
    assert relative_l2(b.saturations[40], a.saturations[40], a.measure) <= 0.01


def test_two_phase_run_properties(tmp_path):
    kappa = small_field()
    rep, traj = run_two_phase(SMALL.with_(out=str(tmp_path)), kappa)
    m = rep.metrics
    assert rep.passed and m["basis_frozen"]
    assert -1e-12 <= m["saturation_min"] and m["saturation_max"] <= 1 + 1e-12
    assert m["mass_balance_max"] <= 1e-10
    assert m["pressure_solves"] == SMALL.n_steps
    for s in SMALL.snapshot_steps:
        raster = np.loadtxt(tmp_path / f"saturation_t{s:03d}.txt")
        assert raster.shape == (21, 21)
        assert np.array_equal(raster.ravel(), traj.saturations[s])
    for name in ("report.txt", "report.json", "report_timings.json"):
        assert (tmp_path / name).is_file()


def test_runs_are_byte_identical(tmp_path):
    kappa = small_field()
    cfg = SMALL.with_(n_steps=6, snapshot_steps=())
    for d in ("a", "b"):
        run_two_phase(cfg.with_(out=str(tmp_path / d)), kappa)
        run_single_phase(cfg.with_(out=str(tmp_path / d / "single")), kappa)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files = [f for f in files if "timings" not in f.name]
    assert len(files) > 5
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
