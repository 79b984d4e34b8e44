import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import enumerate_distance
from percolip.errors import PercolipError
from percolip.fpp import (
    DistanceResult,
    PathQuery,
    distance_on_enriched,
    distances_match,
    distances_to,
    graph_distance,
    localization_check,
    lower_bound_holds,
    path_length,
    triangle_check,
    upper_bound,
    vertex_distances,
)
from percolip.pointcloud import BoxDomain, PointCloud, c_d, c_d_prime, enrich, sample_poisson
from percolip.spatial import build_index


def dist(points, x, y, h, **kw):
    pts = np.asarray(points, dtype=float).reshape(-1, len(x))
    return graph_distance(pts, build_index(pts, h), PathQuery(x, y, h), **kw)


def test_single_point_path():
    r = dist([[0.5, 0.0]], (0, 0), (1, 0), 1.2)
    assert r.length == 0.0 and r.path == (0,) and r.hops == 0


def test_two_point_path():
    r = dist([[0.4, 0.0], [0.8, 0.0]], (0, 0), (1, 0), 0.9)
    assert r.length == pytest.approx(0.4) and r.path == (0, 1)
    assert (r.length, r.path) == enumerate_distance(np.array([[0.4, 0.0], [0.8, 0.0]]), (0, 0), (1, 0), 0.9)


def test_empty_cloud_is_infinite():
    r = dist(np.empty((0, 2)), (0, 0), (1, 0), 0.5)
    assert math.isinf(r.length) and r.path == () and not r.finite
    assert r.to_dict()["length"] == "inf"


def test_query_validation():
    with pytest.raises(PercolipError):
        PathQuery((0, 0), (1, 0), 0.0)
    with pytest.raises(PercolipError):
        PathQuery((0, 0), (1, 0, 0), 1.0)
    with pytest.raises(PercolipError):
        PathQuery((0, math.nan), (1, 0), 1.0)
    with pytest.raises(PercolipError):
        pts = np.zeros((1, 2))
        graph_distance(pts, build_index(pts, 1.0), PathQuery((0, 0, 0), (1, 0, 0), 1.0))


def test_index_must_match_points():
    pts = np.random.default_rng(0).random((10, 2))
    idx = build_index(pts, 0.5)
    with pytest.raises(PercolipError):
        graph_distance(pts[:5], idx, PathQuery((0, 0), (1, 1), 0.5))


def random_instance(rng):
    n = int(rng.integers(0, 9))
    d = int(rng.integers(1, 4))
    pts = rng.random((n, d))
    x, y = rng.random(d), rng.random(d)
    h = float(rng.uniform(0.2, 1.0))
    return pts, x, y, h


def test_exhaustive_oracle_bit_exact():
    rng = np.random.default_rng(11)
    for _ in range(150):
        pts, x, y, h = random_instance(rng)
        r = dist(pts, x, y, h)
        length, path = enumerate_distance(pts, x, y, h)
        assert r.length == length
        assert r.path == path
        if r.finite:
            assert path_length(pts, r.path) == r.length


def test_oracle_on_collinear_grid_ties():
    # many equal-length shortest paths; tie-break must be lexicographic
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [2.0, 0.0], [2.0, 1.0]])
    for x, y in [((0, 0), (2, 1)), ((2, 1), (0, 0)), ((0, 1), (2, 0))]:
        r = dist(pts, x, y, 1.0)
        assert (r.length, r.path) == enumerate_distance(pts, x, y, 1.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_path_invariants_and_bounds(seed):
    rng = np.random.default_rng(seed)
    pts = rng.random((300, 2)) * 6
    idx = build_index(pts, 0.8)
    x, y = rng.random(2) * 6, rng.random(2) * 6
    h = 0.8
    q = PathQuery(x, y, h)
    r = graph_distance(pts, idx, q)
    if not r.finite:
        return
    p = pts[list(r.path)]
    assert np.linalg.norm(p[0] - x) <= h / 2
    assert np.linalg.norm(p[-1] - y) <= h / 2
    assert np.all(np.linalg.norm(np.diff(p, axis=0), axis=1) <= h)
    assert path_length(pts, r.path) == r.length
    assert lower_bound_holds(r, q)
    assert r.length >= q.separation - h
    assert r.hops <= 6 * r.length / h + 1
    # symmetry in length
    back = graph_distance(pts, idx, PathQuery(y, x, h))
    assert back.length == pytest.approx(r.length, rel=1e-12, abs=1e-12)
    # a larger step never lengthens the distance
    big = graph_distance(pts, build_index(pts, 1.2), PathQuery(x, y, 1.2))
    assert big.length <= r.length


def test_clipped_search_matches_unclipped():
    rng = np.random.default_rng(5)
    cloud = sample_poisson(BoxDomain((-8, -8), (58, 8)), 1.0, 3)
    idx = build_index(cloud.points, 1.5)
    for _ in range(20):
        x = rng.random(2) * 10
        y = x + np.array([rng.uniform(5, 40), rng.uniform(-3, 3)])
        a = graph_distance(cloud.points, idx, PathQuery(x, y, 3.0))
        b = graph_distance(cloud.points, idx, PathQuery(x, y, 3.0), clip=True)
        assert a.length == b.length and a.path == b.path


def test_multi_target_search_matches_single():
    cloud = sample_poisson(BoxDomain((0, 0), (30, 10)), 1.0, 8)
    idx = build_index(cloud.points, 1.5)
    targets = [(10.0, 5.0), (20.0, 5.0), (28.0, 2.0)]
    multi = distances_to(cloud.points, idx, (1.0, 5.0), targets, 3.0)
    for y, m in zip(targets, multi):
        single = graph_distance(cloud.points, idx, PathQuery((1.0, 5.0), y, 3.0))
        assert (m.length, m.path) == (single.length, single.path)


def test_vertex_distances_zero_halo():
    pts = np.array([[0.0], [0.5], [1.0], [3.0]])
    d, pred = vertex_distances(pts, build_index(pts, 0.6), 0, 0.6)
    assert d[:3].tolist() == [0.0, 0.5, 1.0]
    assert math.isinf(d[3])
    assert pred[2] == 1 and pred[0] == -1


def test_triangle_check():
    pts = np.random.default_rng(1).random((200, 2)) * 5
    idx = build_index(pts, 0.7)
    z = (2.0, 2.0)
    assert triangle_check(pts, idx, z, z, z, 0.7, 0.7, 0.7)
    # far-away z makes the right side infinite
    assert triangle_check(pts, idx, (1, 1), (4, 4), (100, 100), 0.7, 0.7, 0.7)
    with pytest.raises(PercolipError):
        triangle_check(pts, idx, (1, 1), (4, 4), z, 0.7, 0.7, 0.5)
    rng = np.random.default_rng(2)
    for _ in range(100):
        x, y, w = rng.random((3, 2)) * 5
        assert triangle_check(pts, idx, x, y, w, 0.7, 0.7, 0.7, join_slack=True)


def test_triangle_join_hop_counterexample():
    # both halves are single-point paths of length 0; the joined path needs one hop
    pts = np.array([[0.5, 0.0], [1.5, 0.0]])
    idx = build_index(pts, 1.0)
    assert not triangle_check(pts, idx, (0, 0), (2, 0), (1, 0), 1.0, 1.0, 1.0)
    assert triangle_check(pts, idx, (0, 0), (2, 0), (1, 0), 1.0, 1.0, 1.0, join_slack=True)


def test_localization_check():
    pts = np.array([[0.2, 0.0], [0.5, 0.0], [100.0, 0.0]])
    ok = DistanceResult(0.0, (0,))
    assert localization_check(ok, pts, (0, 0), (1, 0))
    far = np.array([[10 * c_d_prime(2), 0.0]])
    assert not localization_check(DistanceResult(0.0, (0,)), far, (0, 0), (1, 0))
    with pytest.raises(PercolipError):
        localization_check(DistanceResult(math.inf), pts, (0, 0), (1, 0))


def test_enriched_upper_bound_and_finiteness():
    dom = BoxDomain((0, 0), (20, 20))
    cloud = sample_poisson(dom, 0.3, 4)
    e = enrich(cloud, 2.0)
    rng = np.random.default_rng(6)
    from percolip.fpp import enriched_index
    idx = enriched_index(e, 2.0)
    for _ in range(100):
        x, y = rng.random((2, 2)) * 20
        q = PathQuery(x, y, 2.0)
        r = distance_on_enriched(e, q, idx)
        assert r.finite
        if q.separation >= q.h:
            assert r.length <= upper_bound(q)
    q = PathQuery((0, 0), (1, 0), 2.0)
    assert upper_bound(q) == pytest.approx(c_d(2))
    with pytest.raises(PercolipError):
        distance_on_enriched(e, PathQuery((0, 0), (5, 5), 1.0))


def test_enriched_equals_plain_when_nothing_added():
    pts = np.array([[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]])
    cloud = PointCloud(pts, BoxDomain.unit(2))
    e = enrich(cloud, 0.5 * c_d(2))
    q = PathQuery((0.1, 0.1), (0.9, 0.9), 1.5)
    assert distance_on_enriched(e, q).length == dist(pts, q.x, q.y, q.h).length


def test_distances_match_cases():
    dom = BoxDomain((0, 0), (40, 40))
    empty = PointCloud(np.empty((0, 2)), dom)
    e = enrich(empty, 2.0)
    q = PathQuery((5, 5), (30, 30), 3.0)
    assert not distances_match(empty.points, e, q)
    cloud = sample_poisson(dom, 1.0, 2)
    e = enrich(cloud, 2.0)
    with pytest.raises(PercolipError):
        distances_match(cloud.points, e, PathQuery((5, 5), (6, 5), 3.0))
    with pytest.raises(PercolipError):
        distances_match(cloud.points, e, PathQuery((5, 5), (30, 5), 1.0))
    centers = (np.stack(np.meshgrid(np.arange(8), np.arange(8)), -1).reshape(-1, 2) + 0.5) * 0.5
    full = PointCloud(centers, BoxDomain((0, 0), (4, 4)))
    ef = enrich(full, 0.5 * c_d(2))
    assert len(ef.added) == 0
    assert distances_match(full.points, ef, PathQuery((0.0, 0.0), (4.0, 4.0), 1.5))
