import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gmsflow.errors import ConfigurationError
from gmsflow.mesh import (
    INTERFACES,
    OUTFLOW_SIGN,
    StructuredGrid,
    build_grid_hierarchy,
    control_volume_of,
    neighborhood_boundary_nodes,
)


def test_default_field_sizes():
    h = build_grid_hierarchy(100, 100, 10, 10)
    assert h.coarse.n_cells == 100
    assert (h.coarse.rx, h.coarse.ry) == (10, 10)


def test_smallest_hierarchy():
    h = build_grid_hierarchy(2, 2, 1, 1)
    assert h.coarse.n_cells == 1
    assert len(h.interior_coarse_nodes) == 0
    assert len(h.neighborhoods) == 4
    assert all(len(nb.elements) == 1 for nb in h.neighborhoods)


def test_single_interior_node_covers_domain():
    h = build_grid_hierarchy(4, 4, 2, 2)
    (k,) = h.interior_coarse_nodes
    nb = h.neighborhoods[k]
    assert sorted(nb.elements) == [0, 1, 2, 3]
    assert nb.n_local == h.fine.n_nodes


@pytest.mark.parametrize("nx, Nx", [(10, 3), (7, 2)])
def test_non_divisible_counts_rejected(nx, Nx):
    with pytest.raises(ConfigurationError, match=f"Nx={Nx}"):
        build_grid_hierarchy(nx, 4, Nx, 2)


def test_counts_and_widths():
    g = StructuredGrid(6, 4, lx=3.0, ly=2.0)
    assert g.n_cells == 24 and g.n_nodes == 35
    assert g.hx == 0.5 and g.hy == 0.5
    assert g.cell_nodes.shape == (24, 4)


def test_neighborhood_boundary_counts():
    # interior node, 2x2 elements of ratio 5: perimeter of a 10x10 cell patch
    h = build_grid_hierarchy(15, 15, 3, 3)
    nb = h.neighborhoods[h.coarse.node_id(1, 1)]
    assert nb.L == 40
    # corner neighborhood of one element with ratio 2
    h = build_grid_hierarchy(4, 4, 2, 2)
    assert h.neighborhoods[0].L == 8
    # ratio 1, interior node: 3x3 node patch
    h = build_grid_hierarchy(3, 3, 3, 3)
    assert h.neighborhoods[h.coarse.node_id(1, 1)].L == 8


def test_boundary_nodes_counter_clockwise():
    h = build_grid_hierarchy(4, 4, 2, 2)
    nb = h.neighborhoods[h.coarse.node_id(1, 1)]
    xy = h.fine.node_coords[neighborhood_boundary_nodes(nb)]
    c = xy - xy.mean(axis=0)
    ang = np.unwrap(np.arctan2(c[:, 1], c[:, 0]))
    assert np.all(np.diff(ang) > 0)
    assert len(np.unique(neighborhood_boundary_nodes(nb))) == nb.L


def test_interior_control_volume_geometry():
    h = build_grid_hierarchy(8, 8, 4, 4)
    v = h.coarse.node_id(2, 2)
    cv = control_volume_of(h, v, "coarse")
    H = h.coarse.hx
    assert len({e for e, _ in cv.quadrants}) == 4
    assert len(cv.interfaces) == 8
    assert cv.boundary_length == pytest.approx(4 * H)  # 2H per axis, square cells
    assert cv.measure == pytest.approx(H * H)


def test_corner_control_volume():
    h = build_grid_hierarchy(8, 8, 4, 4)
    cv = control_volume_of(h, 0, "coarse")
    assert len(cv.quadrants) == 1
    assert len(cv.interfaces) == 2
    assert cv.measure == pytest.approx(h.coarse.cell_area / 4)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(1, 4))
def test_partition_properties(Nx, Ny, rx, ry):
    h = build_grid_hierarchy(Nx * rx, Ny * ry, Nx, Ny, 2.0, 1.5)
    for level in ("fine", "coarse"):
        m = h.dual(level).measure
        assert abs(m.sum() - 3.0) <= 1e-12 * 3.0
    # every fine cell in exactly one coarse element
    counts = np.bincount(h.coarse.element_cells.ravel(), minlength=h.fine.n_cells)
    assert np.all(counts == 1)
    # every fine node in the support of 1..4 neighborhoods
    cover = np.zeros(h.fine.n_nodes, int)
    for nb in h.neighborhoods:
        cover[nb.nodes[nb.support_local]] += 1
    assert cover.min() >= 1 and cover.max() <= 4


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_half_edge_pairing_telescopes(nx, ny, seed):
    """Summing the outflow of any interface flux field over all volumes gives zero."""
    g = StructuredGrid(nx, ny)
    F = np.random.default_rng(seed).normal(size=(g.n_cells, 4))
    out = np.zeros(g.n_nodes)
    cn = g.cell_nodes
    for k, (a, b) in enumerate(INTERFACES):
        np.add.at(out, cn[:, a], F[:, k])
        np.add.at(out, cn[:, b], -F[:, k])
    assert abs(out.sum()) <= 1e-12 * np.abs(F).sum()
    # the quadrant sign table encodes the same pairing
    assert np.allclose(OUTFLOW_SIGN.sum(axis=0), 0.0)
    assert np.all(np.abs(OUTFLOW_SIGN).sum(axis=0) == 2)
