import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gmsflow.errors import ConfigurationError, PermeabilityParseError
from gmsflow.permeability import (
    KINDS,
    PermeabilityRaster,
    bundled_field,
    field_hash,
    gen_perm,
    load_perm,
    save_perm,
)


def test_load_small_matrix(tmp_path):
    p = tmp_path / "k.txt"
    p.write_text("1 2\n3 4\n")
    r = load_perm(p)
    assert r.width == 2 and r.height == 2
    assert np.array_equal(r.cells, [1.0, 2.0, 3.0, 4.0])


def test_load_column_format(tmp_path):
    p = tmp_path / "k.txt"
    p.write_text("2 1\n5\n7\n")
    r = load_perm(p)
    assert r.values.shape == (1, 2) and r.cells.tolist() == [5.0, 7.0]


def test_zero_entry_reports_position(tmp_path):
    p = tmp_path / "k.txt"
    p.write_text("1 2 3\n4 0 6\n")
    with pytest.raises(PermeabilityParseError) as err:
        load_perm(p)
    assert err.value.location == (1, 1)


@pytest.mark.parametrize("text", ["1 2\n3\n", "1 x\n", "", "1 nan\n", "1 -2\n"])
def test_malformed_files_rejected(tmp_path, text):
    p = tmp_path / "k.txt"
    p.write_text(text)
    with pytest.raises(PermeabilityParseError):
        load_perm(p)


def test_shape_check(tmp_path):
    p = tmp_path / "k.txt"
    p.write_text("1 2\n3 4\n")
    with pytest.raises(ConfigurationError):
        load_perm(p, shape=(3, 2))


@given(st.integers(1, 6), st.integers(1, 6), st.sampled_from(["matrix", "column"]), st.integers(0, 10**6))
def test_round_trip_is_lossless(tmp_path_factory, w, h, fmt, seed):
    v = 10 ** np.random.default_rng(seed).uniform(-3, 6, (h, w))
    r = PermeabilityRaster(v)
    p = tmp_path_factory.mktemp("rt") / "k.txt"
    save_perm(r, p, fmt)
    back = load_perm(p, fmt)
    assert np.array_equal(back.values, r.values)
    assert back.hash() == r.hash()


@pytest.mark.parametrize("kind", KINDS)
def test_generators_are_deterministic_with_exact_contrast(kind):
    a = gen_perm(kind, 40, 30, 1e4, seed=3)
    b = gen_perm(kind, 40, 30, 1e4, seed=3)
    assert a.hash() == b.hash()
    assert a.values.shape == (30, 40)
    assert a.contrast == pytest.approx(1e4)
    assert a.values.min() == pytest.approx(1.0)


def test_seed_changes_field():
    assert gen_perm("inclusions", 30, 30, 1e3, 0).hash() != gen_perm("inclusions", 30, 30, 1e3, 1).hash()


def test_bundled_field():
    r = bundled_field()
    assert r.values.shape == (100, 100)
    assert set(np.unique(r.values)) == {1.0, 1e3}
    assert r.hash() == bundled_field().hash()


def test_bad_rasters_rejected():
    with pytest.raises(ConfigurationError):
        PermeabilityRaster(np.ones(3))
    with pytest.raises(ConfigurationError):
        PermeabilityRaster(np.array([[1.0, 0.0]]))
    with pytest.raises(ConfigurationError):
        gen_perm("waves", 4, 4)


def test_field_hash_uses_float64_bytes():
    assert field_hash(np.array([[1, 2]])) == field_hash(np.array([[1.0, 2.0]]))
