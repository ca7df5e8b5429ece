import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_rotation
from oracles import brute_knn
from tude.geometry import PointCloud
from tude.spatial import (
    SpatialIndex,
    auto_seed_radius,
    auto_voxel_size,
    build_index,
    coverage_check,
    knn,
    select_seeds,
    select_seeds_radius,
)


def test_single_point_index():
    idx = build_index(PointCloud([[1.0, 2.0, 3.0]]))
    assert knn(idx, np.array([9.0, 9.0, 9.0]), 1) == [(0, pytest.approx(np.sqrt(64 + 49 + 36)))]


def test_grid_center_is_its_own_nearest():
    grid = np.array(list(itertools.product([-1.0, 0.0, 1.0], repeat=3)))
    idx = build_index(PointCloud(grid))
    (i, d), = knn(idx, np.zeros(3), 1)
    assert i == 13 and d == 0.0


def test_coincident_query_and_full_k(rng):
    pts = rng.normal(size=(30, 3))
    idx = build_index(PointCloud(pts))
    res = knn(idx, pts[7], 30)
    assert res[0] == (7, 0.0)
    d = [r[1] for r in res]
    assert sorted(i for i, _ in res) == list(range(30))
    assert d == sorted(d)


def test_k_too_large():
    idx = build_index(PointCloud(np.eye(3)))
    with pytest.raises(ValueError):
        knn(idx, np.zeros(3), 4)


@pytest.mark.parametrize("k", [7, 10])
def test_knn_matches_linear_scan(rng, k):
    pts = rng.uniform(size=(500, 3))
    idx = build_index(PointCloud(pts))
    for q in rng.uniform(size=(50, 3)):
        order, dist = brute_knn(pts, q, k)
        got = knn(idx, q, k)
        assert [i for i, _ in got] == list(order)
        np.testing.assert_allclose([d for _, d in got], dist, rtol=0, atol=0)


def test_ties_broken_by_index():
    # eight cube corners all at the same distance from the centre
    corners = np.array(list(itertools.product([0.0, 1.0], repeat=3)))[::-1]
    idx = SpatialIndex(corners)
    nbrs, dist = idx.query(np.full((1, 3), 0.5), 8)
    assert list(nbrs[0]) == list(range(8))
    assert np.all(dist == dist[0, 0])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(1, 8), st.integers(0, 2 ** 32 - 1), st.booleans())
def test_knn_property(n, k, seed, lattice):
    rng = np.random.default_rng(seed)
    # lattice points produce many exact distance ties
    pts = rng.integers(0, 3, size=(n, 3)).astype(float) if lattice else rng.normal(size=(n, 3))
    k = min(k, n)
    idx = SpatialIndex(pts)
    qs = rng.integers(0, 3, size=(5, 3)).astype(float)
    nbrs, dist = idx.query(qs, k)
    for q, row_i, row_d in zip(qs, nbrs, dist):
        order, d = brute_knn(pts, q, k)
        assert list(row_i) == list(order)
        np.testing.assert_array_equal(row_d, d)


def test_big_voxel_gives_one_seed(rng):
    cloud = PointCloud(rng.uniform(size=(100, 3)))
    assert len(select_seeds(cloud, 10.0)) == 1


def test_two_far_points_two_seeds():
    seeds = select_seeds(PointCloud([[0, 0, 0], [10, 0, 0]]), 1.0)
    assert list(seeds.indices) == [0, 1]


def test_voxel_seed_nearest_to_voxel_centroid():
    pts = np.array([[0.0] * 3, [0.1] * 3, [0.2] * 3, [0.6] * 3, [0.95] * 3])
    seeds = select_seeds(PointCloud(pts), 1.0)
    # member centroid is 0.37 on each axis; the cube centre 0.5 would pick point 3
    assert list(seeds.indices) == [2]


def test_voxel_seeds_cover_unit_cube(rng):
    pts = rng.uniform(size=(1000, 3))
    seeds = select_seeds(PointCloud(pts), 0.2)
    assert len(set(seeds.indices)) == len(seeds)
    assert list(seeds.indices) == sorted(seeds.indices)
    _, d = SpatialIndex(pts[seeds.indices]).query(pts, 1)
    assert d.max() <= np.sqrt(3) * 0.2
    # at most one seed per voxel
    cells = np.floor((pts[seeds.indices] - pts.min(axis=0)) / 0.2)
    assert len({tuple(c) for c in cells}) == len(seeds)
    again = select_seeds(PointCloud(pts), 0.2)
    np.testing.assert_array_equal(again.indices, seeds.indices)


def test_radius_seeds_are_separated_and_cover(rng):
    pts = rng.uniform(size=(800, 3))
    r = 0.1
    seeds = select_seeds_radius(PointCloud(pts), r)
    sp = pts[seeds.indices]
    d = np.sqrt(((sp[:, None] - sp[None]) ** 2).sum(-1)) + np.eye(len(sp)) * 9
    assert d.min() > r
    _, nd = SpatialIndex(sp).query(pts, 1)
    assert nd.max() <= r


def test_radius_seeds_commute_with_rigid_motion(rng):
    pts = rng.normal(size=(600, 3))
    Q = random_rotation(rng)
    moved = PointCloud(pts @ Q.T + [3.0, -2.0, 1.0])
    a = select_seeds_radius(PointCloud(pts), auto_seed_radius(PointCloud(pts), 0.48))
    b = select_seeds_radius(moved, auto_seed_radius(moved, 0.48))
    np.testing.assert_array_equal(a.indices, b.indices)


@pytest.mark.parametrize("method", ["voxel", "radius"])
def test_auto_size_hits_ratio(method):
    from tude.synth import make_shape

    cloud = make_shape("sphere", 2000)
    if method == "voxel":
        n = len(select_seeds(cloud, auto_voxel_size(cloud, 0.48)))
    else:
        n = len(select_seeds_radius(cloud, auto_seed_radius(cloud, 0.48)))
    assert abs(n / 2000 - 0.48) < 0.03


def test_coverage_examples(rng):
    pts = rng.normal(size=(50, 3))
    cloud = PointCloud(pts)
    all_seeds = select_seeds(cloud, 1e-9)
    assert len(all_seeds) == 50
    assert coverage_check(cloud, all_seeds, 1)[0]
    one = select_seeds(cloud, 1e6)
    assert coverage_check(cloud, one, 50)[0]
    covered, missing = coverage_check(cloud, one, 5)
    assert not covered and len(missing) == 45


def test_coverage_matches_union(rng):
    pts = rng.uniform(size=(400, 3))
    cloud = PointCloud(pts)
    seeds = select_seeds(cloud, 0.3)
    covered, missing = coverage_check(cloud, seeds, 6)
    union = set()
    for s in seeds.indices:
        union |= set(brute_knn(pts, pts[s], 6)[0])
    assert set(missing) == set(range(400)) - union
    assert covered == (not missing.size)
