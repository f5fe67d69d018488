import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import pdist

from stencil_lab.nodes import (UNIT_SQUARE, GenConfig, InsufficientCandidatesError,
                               InvalidDomainError, Rectangle, Stencil, StencilSample,
                               ZeroRadiusError, fill_nodes, normalize, recenter_variants,
                               sample_stencil)


@pytest.fixture(scope="module")
def cloud():
    return fill_nodes(UNIT_SQUARE, 0.02, 11)


def brute_min_distance(points):
    best = math.inf
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            best = min(best, math.dist(points[i], points[j]))
    return best


def test_fill_unit_square():
    c = fill_nodes(UNIT_SQUARE, 0.1, 1)
    assert 70 <= len(c) <= 130
    assert brute_min_distance(c.points.tolist()) >= 0.05
    assert np.all((c.points >= 0) & (c.points <= 1))


@pytest.mark.parametrize("h, seed", [(0.05, 0), (0.08, 3), (0.03, 9)])
def test_fill_spacing_and_density(h, seed):
    domain = Rectangle(-1.0, 0.0, 1.0, 0.5)
    c = fill_nodes(domain, h, seed)
    assert pdist(c.points).min() >= 0.5 * h
    expected = domain.area / h ** 2
    assert 0.7 * expected <= len(c) <= 1.3 * expected
    assert np.all(c.points[:, 0] >= -1) and np.all(c.points[:, 1] <= 0.5)


def test_fill_errors_and_determinism():
    with pytest.raises(InvalidDomainError):
        fill_nodes(UNIT_SQUARE, 2.0, 1)
    with pytest.raises(InvalidDomainError):
        fill_nodes(Rectangle(0, 0, 0, 1), 0.1, 1)
    a = fill_nodes(UNIT_SQUARE, 0.05, 4)
    b = fill_nodes(UNIT_SQUARE, 0.05, 4)
    assert a.points.tobytes() == b.points.tobytes()


def test_sample_basic(cloud):
    cfg = GenConfig(stencil_size_s=9)
    smp = sample_stencil(cloud, cfg, np.random.default_rng(0))
    assert smp.nodes.shape == (9, 2)
    assert smp.center_index == 0
    assert len({tuple(p) for p in smp.nodes}) == 9


def test_forced_selection_when_pool_equals_size(cloud):
    cfg = GenConfig(stencil_size_s=7, candidate_pool_m=7)
    rng = np.random.default_rng(1)
    for _ in range(20):
        smp = sample_stencil(cloud, cfg, rng)
        _, idx = cloud.tree.query(smp.nodes[0], k=7)
        assert {tuple(p) for p in cloud.points[idx]} == {tuple(p) for p in smp.nodes}


def test_zero_decay_is_uniform(cloud):
    # with beta = 0 every pool member is equally likely: tally how often the
    # nearest and the farthest pool member of the drawn centre are picked
    cfg = GenConfig(stencil_size_s=6, candidate_pool_m=18, decay_beta=0.0)
    rng = np.random.default_rng(2)
    draws = 3000
    hits = np.zeros(2, dtype=int)
    for _ in range(draws):
        smp = sample_stencil(cloud, cfg, rng)
        _, pool = cloud.tree.query(smp.nodes[0], k=18)
        chosen = {tuple(p) for p in smp.nodes[1:]}
        hits += [tuple(cloud.points[pool[1]]) in chosen, tuple(cloud.points[pool[-1]]) in chosen]
    # each has probability 5/17 per draw; 4 sigma band
    p = 5 / 17
    sd = math.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(hits - draws * p) < 4 * sd)


def test_radial_decay_prefers_near_nodes(cloud):
    s = 9
    cfg = GenConfig(stencil_size_s=s, decay_beta=2.0)
    rng = np.random.default_rng(3)
    selected, pool = [], []
    for _ in range(10_000):
        smp = sample_stencil(cloud, cfg, rng)
        dist, _ = cloud.tree.query(smp.nodes[0], k=3 * s)
        pool.append(dist[1:].mean())
        selected.append(np.linalg.norm(smp.nodes[1:] - smp.nodes[0], axis=1).mean())
    assert np.mean(selected) < np.mean(pool)


def test_insufficient_candidates():
    small = fill_nodes(UNIT_SQUARE, 0.3, 0)
    with pytest.raises(InsufficientCandidatesError):
        sample_stencil(small, GenConfig(stencil_size_s=15), np.random.default_rng(0))


def test_config_rejects_small_pool():
    with pytest.raises(ValueError):
        GenConfig(stencil_size_s=9, candidate_pool_m=5)


def test_recenter_variants():
    one = StencilSample(np.array([[0.2, 0.3]]), 0)
    (only,) = recenter_variants(one)
    assert np.array_equal(only.nodes, one.nodes) and only.center_index == 0

    nodes = np.random.default_rng(0).uniform(size=(6, 2))
    variants = recenter_variants(StencilSample(nodes, 0))
    assert sorted(v.center_index for v in variants) == list(range(6))
    for v in variants:
        assert sorted(map(tuple, v.nodes)) == sorted(map(tuple, nodes))


def test_rim_centred_hexagon_is_not_symmetric():
    hexagon = np.array([(0.0, 0.0)] + [(math.cos(k * math.pi / 3), math.sin(k * math.pi / 3))
                                       for k in range(6)])
    variants = recenter_variants(StencilSample(hexagon, 0))
    centred = normalize(variants[0]).coords
    assert np.allclose(centred.mean(axis=0), 0.0, atol=1e-15)
    rim = normalize(variants[1]).coords
    # rim node (1, 0) at the origin: the others sit to its left, centroid at (-1/2, 0) / 2
    np.testing.assert_allclose(rim.mean(axis=0), [-0.5, 0.0], atol=1e-12)


def test_normalize_example():
    smp = StencilSample(np.array([[1.0, 1.0], [2.0, 1.0], [1.0, 3.0]]), 0)
    np.testing.assert_array_equal(normalize(smp).coords, [[0, 0], [0.5, 0], [0, 1]])


def test_normalize_moves_center_first():
    smp = StencilSample(np.array([[1.0, 1.0], [2.0, 1.0], [1.0, 3.0]]), 1)
    np.testing.assert_allclose(normalize(smp).coords,
                               np.array([[0, 0], [-1, 0], [-1, 2]]) / math.sqrt(5))


def test_normalize_zero_radius():
    with pytest.raises(ZeroRadiusError):
        normalize(StencilSample(np.zeros((3, 2)), 0))


points = st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=2, max_size=20,
                  unique=True)


@settings(max_examples=200, deadline=None)
@given(pts=points, shift=st.tuples(st.floats(-50, 50), st.floats(-50, 50)))
def test_normalize_properties(pts, shift):
    nodes = np.array(pts)
    if np.sqrt(((nodes - nodes[0]) ** 2).sum(axis=1)).max() < 1e-6:
        return
    st_ = normalize(StencilSample(nodes, 0))
    r = np.sqrt((st_.coords ** 2).sum(axis=1))
    assert np.array_equal(st_.coords[0], [0.0, 0.0])
    assert abs(r.max() - 1.0) < 1e-15
    assert np.all(r <= 1.0 + 1e-15)
    again = normalize(st_)
    np.testing.assert_allclose(again.coords, st_.coords, rtol=0, atol=4e-16)
    moved = normalize(StencilSample(nodes + np.array(shift), 0))
    scale = 1.0 + np.abs(nodes).max() + np.abs(shift).max()
    tol = 64 * np.finfo(float).eps * scale / np.sqrt(((nodes - nodes[0]) ** 2).sum(axis=1)).max()
    np.testing.assert_allclose(moved.coords, st_.coords, rtol=0, atol=tol)


def test_normalize_keeps_stencil_instances():
    s = Stencil(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, -0.5]]))
    assert np.array_equal(normalize(s).coords, s.coords)
