import json

import numpy as np
import pytest

from gmsflow.cli import main
from gmsflow.permeability import load_perm


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def write_perm(path, values):
    np.savetxt(path, values, fmt="%.17g")
    return str(path)


def test_missing_perm_is_usage_error(capsys):
    with pytest.raises(SystemExit) as err:
        main(["solve", "--basis", "1+0"])
    assert err.value.code == 2


def test_gen_perm_writes_raster(tmp_path, capsys):
    out = tmp_path / "k.txt"
    code, text, _ = run(["gen-perm", "fractures", "--size", "30x20", "--contrast", "1e5", "--seed", "2", "--out", str(out)], capsys)
    assert code == 0 and "contrast 1e+05" in text
    r = load_perm(out)
    assert (r.width, r.height) == (30, 20) and r.contrast == pytest.approx(1e5)


def test_gen_perm_unit_contrast_is_uniform(tmp_path, capsys):
    out = tmp_path / "k.txt"
    assert run(["gen-perm", "inclusions", "--size", "8x8", "--contrast", "1", "--out", str(out)], capsys)[0] == 0
    assert np.all(load_perm(out).values == 1.0)


def test_solve_unit_field_is_exact(tmp_path, capsys):
    perm = write_perm(tmp_path / "k.txt", np.ones((20, 20)))
    out = tmp_path / "run"
    code, text, _ = run(["solve", "--perm", perm, "--coarse", "5x5", "--basis", "1+0", "--out", str(out)], capsys)
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["metrics"]["velocity_error"] <= 1e-8 and rep["metrics"]["pressure_error"] <= 1e-8
    for name in ("perm.txt", "config.ini", "report.txt", "fluxes.txt"):
        assert (out / name).is_file()
    assert "# field_hash:" in text


def test_config_file_and_flag_precedence(tmp_path, capsys):
    perm = write_perm(tmp_path / "k.txt", np.ones((20, 20)))
    cfg = tmp_path / "c.ini"
    cfg.write_text("[experiment]\nNx = 5\nNy = 5\nbasis = 2+0\nmode = coarse\n")
    code, text, _ = run(["solve", "--perm", perm, "--config", str(cfg), "--basis", "1+0"], capsys)
    assert code == 0
    assert "# L_z: 1+0" in text and "# mode: coarse" in text


def test_enrich_study_table(tmp_path, capsys):
    kappa = np.where(np.random.default_rng(0).uniform(size=(20, 20)) < 0.2, 1e3, 1.0)
    perm = write_perm(tmp_path / "k.txt", kappa)
    code, text, _ = run(["enrich-study", "--perm", perm, "--coarse", "5x5", "--out", str(tmp_path / "s")], capsys)
    assert code == 0
    rows = text.split("[study]")[1].strip().splitlines()[1:]
    assert [r.split("\t")[0] for r in rows] == ["1+0", "2+0", "5+0", "2+1", "2+2"]


def test_simulate_and_report(tmp_path, capsys):
    perm = write_perm(tmp_path / "k.txt", np.ones((20, 20)))
    base = ["--perm", perm, "--coarse", "5x5", "--steps", "4"]
    assert run(["simulate", *base, "--basis", "1+0", "--out", str(tmp_path / "a")], capsys)[0] == 0
    assert run(["simulate", *base, "--basis", "2+1", "--out", str(tmp_path / "b")], capsys)[0] == 0
    assert (tmp_path / "a" / "saturation_t004.txt").is_file()
    code, text, _ = run(["report", str(tmp_path / "a"), str(tmp_path / "b"), "--out", str(tmp_path / "sum")], capsys)
    assert code == 0
    lines = text.strip().splitlines()
    assert lines[0].startswith("run\tkind") and len(lines) > 4
    assert all(len(l.split("\t")) == 8 for l in lines)
    assert (tmp_path / "sum" / "summary.json").is_file()


def test_errors_give_one_line_diagnostic(tmp_path, capsys):
    bad = tmp_path / "k.txt"
    bad.write_text("1 2\n0 4\n")
    code, _, err = run(["solve", "--perm", str(bad)], capsys)
    assert code == 1
    assert err.count("\n") == 1 and err.startswith("gmsflow solve: error:")
    code, _, err = run(["report", str(tmp_path / "nothing")], capsys)
    assert code == 1 and "no report" in err
