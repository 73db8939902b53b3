import numpy as np
import pytest

from gert.geodata import BuildingFootprint, TerrainGrid
from gert.scene import assemble_scene
from gert.synthetic import box_scene
from gert.tracer.accel import brute_force_blocked, brute_force_intersect, build_accel

L_RING = np.array([[-40, -40], [-20, -40], [-20, -30], [-30, -30], [-30, -20], [-40, -20.0]])


@pytest.fixture(scope="module")
def city():
    t = TerrainGrid(5, 5, 25.0, -50.0, -50.0, np.random.default_rng(3).uniform(0, 2, (5, 5)))
    fps = [BuildingFootprint(0, np.array([[0, 0], [10, 0], [10, 10], [0, 10.0]]), 10.0),
           BuildingFootprint(1, L_RING, 5.0)]
    return assemble_scene(fps, t)


def test_bvh_matches_brute_force(city):
    acc = build_accel(city)
    rng = np.random.default_rng(0)
    o = rng.uniform(-50, 50, (2000, 3))
    o[:, 2] = rng.uniform(0.5, 20, 2000)
    d = rng.normal(size=(2000, 3))
    t_b, i_b = acc.intersect(o, d, backend="numba")
    t_n, i_n = acc.intersect(o, d, backend="numpy")
    t_r, i_r = brute_force_intersect(acc.v0, acc.v1, acc.v2, o, d)
    assert np.array_equal(i_b, i_r) and np.array_equal(i_n, i_r)
    assert np.array_equal(t_b, t_r)
    assert (i_r >= 0).sum() > 500


def test_blocked_matches_brute_force(city):
    acc = build_accel(city)
    rng = np.random.default_rng(1)
    a = rng.uniform(-45, 45, (1000, 3))
    a[:, 2] = rng.uniform(3, 15, 1000)
    b = rng.uniform(-45, 45, (1000, 3))
    b[:, 2] = rng.uniform(3, 15, 1000)
    ref = brute_force_blocked(acc.v0, acc.v1, acc.v2, a, b)
    assert np.array_equal(acc.segments_blocked(a, b, backend="numba"), ref)
    assert np.array_equal(acc.segments_blocked(a, b, backend="numpy"), ref)
    assert 0 < ref.sum() < len(ref)


def test_facets_merge_coplanar_triangles():
    acc = build_accel(box_scene())
    assert len(acc.facets) == 6
    assert len(acc.edges) == 0  # inward-facing shell: every edge is concave


def test_box_building_edges_are_convex_corners(city):
    acc = build_accel(city)
    # square: 4 vertical + 4 roof edges; L-shape: 5 convex vertical + 6 roof edges
    assert len(acc.edges) == 8 + 11
    assert np.all(acc.edges.wedge_n > 1.0)
    assert np.allclose(np.linalg.norm(acc.edges.t, axis=1), 1.0)


def test_empty_accel():
    acc = build_accel(None)
    t, i = acc.intersect(np.zeros((2, 3)), np.ones((2, 3)))
    assert np.all(np.isinf(t)) and np.all(i == -1)
