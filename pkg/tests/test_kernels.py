import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from gacnet import kernels
from gacnet._accel import HAVE_NUMBA

both = pytest.mark.parametrize("use_numba", [False, pytest.param(True, marks=pytest.mark.skipif(
    not HAVE_NUMBA, reason="numba unavailable"))])


def brute_fps(points, m, start):
    out = [start]
    for _ in range(m - 1):
        best, best_j = -1.0, None
        for j in range(len(points)):
            d = min(float(((points[j] - points[i]) ** 2).sum()) for i in out)
            if d > best:
                best, best_j = d, j
        out.append(best_j)
    return out


@both
def test_fps_line(use_numba):
    pts = np.array([[0, 0, 0.0], [0, 0, 1], [0, 0, 10]])
    assert kernels.fps(pts, 2, 0, use_numba).tolist() == [0, 2]
    assert kernels.fps(pts, 1, 1, use_numba).tolist() == [1]


@both
def test_fps_brute_force(use_numba, rng):
    for _ in range(20):
        n = int(rng.integers(1, 30))
        pts = rng.integers(0, 4, size=(n, 3)).astype(float)     # many ties
        m = int(rng.integers(1, n + 1))
        start = int(rng.integers(n))
        assert kernels.fps(pts, m, start, use_numba).tolist() == brute_fps(pts, m, start)


def brute_ball(points, center, r, k):
    d = [(float(((points[j] - points[center]) ** 2).sum()), j) for j in range(len(points))]
    hits = sorted(x for x in d if x[0] <= r * r)
    idx = [j for _, j in hits[:k]]
    return idx + [idx[0]] * (k - len(idx))


@both
def test_ball_query_brute_force(use_numba, rng):
    for _ in range(20):
        pts = rng.uniform(-1, 1, size=(10, 3))
        centers = np.arange(10)
        got = kernels.ball_query(pts, centers, 0.5, 4, use_numba)
        for c in centers:
            assert got[c].tolist() == brute_ball(pts, c, 0.5, 4)


@both
def test_ball_query_isolated_center_pads_with_itself(use_numba):
    pts = np.array([[0, 0, 0.0], [5, 5, 5]])
    assert kernels.ball_query(pts, [1], 0.1, 3, use_numba).tolist() == [[1, 1, 1]]
    assert sorted(kernels.ball_query(pts, [0], np.inf, 2, use_numba)[0].tolist()) == [0, 1]


def brute_window_knn(mask, radius, k):
    H, W = mask.shape
    out = []
    for v in range(H):
        for u in range(W):
            c = sorted(((vv - v) ** 2 + (uu - u) ** 2, vv * W + uu) for vv in range(H) for uu in range(W)
                       if mask[vv, uu] and max(abs(vv - v), abs(uu - u)) <= radius)
            ids = [q for _, q in c[:k]]
            out.append(ids + [-1] * (k - len(ids)))
    return np.array(out)


@both
def test_window_knn_brute_force(use_numba, rng):
    for _ in range(15):
        H, W = rng.integers(1, 12, 2)
        mask = rng.random((H, W)) < rng.uniform(0.05, 0.6)
        radius, k = int(rng.integers(1, 6)), int(rng.integers(1, 9))
        idx, cnt = kernels.window_knn(mask, radius, k, use_numba)
        ref = brute_window_knn(mask, radius, k)
        np.testing.assert_array_equal(idx, ref)
        np.testing.assert_array_equal(cnt, (ref >= 0).sum(1))


@both
def test_block_select_oracle(use_numba, rng):
    v = np.zeros((4, 4))
    v[0, 0], v[0, 1], v[1, 0] = 2.0, 2.1, 9.0
    v[2, 2] = 5.0
    out = kernels.block_select(v, 2, use_numba)
    assert out.tolist() == [[2.1, 0.0], [0.0, 5.0]]
    for _ in range(20):
        f = int(rng.choice([2, 4, 8]))
        vals = np.round(rng.uniform(1, 5, (2 * f, 3 * f)), 1) * (rng.random((2 * f, 3 * f)) < 0.4)
        np.testing.assert_array_equal(kernels.block_select(vals, f, use_numba), oracles.block_select(vals, f))
    np.testing.assert_array_equal(kernels.block_select(vals, 1, use_numba), vals)


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba unavailable")
@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_numba_and_numpy_paths_agree(seed):
    r = np.random.default_rng(seed)
    pts = r.normal(size=(int(r.integers(1, 60)), 3))
    m = int(r.integers(1, len(pts) + 1))
    np.testing.assert_array_equal(kernels.fps(pts, m, 0, True), kernels.fps(pts, m, 0, False))
    centers = np.arange(0, len(pts), 3)
    np.testing.assert_array_equal(kernels.ball_query(pts, centers, 0.7, 5, True),
                                  kernels.ball_query(pts, centers, 0.7, 5, False))
    mask = r.random((9, 13)) < 0.2
    for a, b in zip(kernels.window_knn(mask, 3, 4, True), kernels.window_knn(mask, 3, 4, False)):
        np.testing.assert_array_equal(a, b)
    vals = r.uniform(0, 3, (8, 16)) * (r.random((8, 16)) < 0.5)
    np.testing.assert_array_equal(kernels.block_select(vals, 4, True), kernels.block_select(vals, 4, False))
