import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from xmcl import kernels as K


def greedy_fps_oracle(pts, k, seed_index=0):
    """Exhaustive max-min selection in plain Python."""
    pts = [tuple(map(float, p)) for p in pts]
    chosen = [seed_index]
    while len(chosen) < k:
        best, best_i = -1.0, 0
        for i, p in enumerate(pts):
            m = min(
                (p[0] - pts[c][0]) ** 2 + (p[1] - pts[c][1]) ** 2 + (p[2] - pts[c][2]) ** 2 for c in chosen
            )
            if m > best:
                best, best_i = m, i
        chosen.append(best_i)
    return chosen


def ball_oracle(centers, xyz, r, k_max):
    out = []
    for c in centers:
        d = [float(((p - c) ** 2).sum()) for p in xyz]
        hits = [i for i, v in enumerate(d) if v <= r * r][:k_max]
        if not hits:
            hits = [int(np.argmin(d))] * k_max
        out.append(hits + [hits[0]] * (k_max - len(hits)))
    return np.array(out)


def test_fps_matches_exhaustive_greedy(kernel_path):
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 65))
        pts = rng.standard_normal((n, 3))
        k = int(rng.integers(1, n + 1))
        seed = int(rng.integers(0, n))
        assert K.farthest_point_sample(pts, k, seed).tolist() == greedy_fps_oracle(pts, k, seed)


def test_fps_duplicates_tie_to_lowest_index(kernel_path):
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [1, 0, 0], [0, 0, 0]])
    assert K.farthest_point_sample(pts, 4).tolist() == [0, 1, 0, 0]


def test_fps_rejects_bad_k(kernel_path):
    pts = np.zeros((4, 3))
    with pytest.raises(ValueError, match="k=5"):
        K.farthest_point_sample(pts, 5)
    with pytest.raises(ValueError):
        K.farthest_point_sample(pts, 2, seed_index=4)


def test_ball_query_matches_oracle(kernel_path):
    rng = np.random.default_rng(1)
    for _ in range(30):
        xyz = rng.uniform(-1, 1, (int(rng.integers(1, 40)), 3))
        centers = rng.uniform(-1, 1, (5, 3))
        r = float(rng.uniform(0.05, 1.0))
        k = int(rng.integers(1, 8))
        np.testing.assert_array_equal(K.ball_query(centers, xyz, r, k), ball_oracle(centers, xyz, r, k))


def test_ball_query_empty_falls_back_to_nearest(kernel_path):
    xyz = np.array([[5.0, 0, 0], [3.0, 0, 0], [9.0, 0, 0]])
    idx = K.ball_query(np.zeros((1, 3)), xyz, 0.5, 4)
    assert idx.tolist() == [[1, 1, 1, 1]]


def test_ball_query_radius_validation():
    with pytest.raises(ValueError, match="radius"):
        K.ball_query(np.zeros((1, 3)), np.zeros((2, 3)), 0.0, 2)


def test_knn_matches_sort(kernel_path):
    rng = np.random.default_rng(2)
    xyz = rng.standard_normal((50, 3))
    q = rng.standard_normal((20, 3))
    idx, d2 = K.knn(q, xyz, 3)
    full = ((q[:, None] - xyz[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(idx, np.argsort(full, axis=1, kind="stable")[:, :3])
    np.testing.assert_allclose(d2, np.sort(full, axis=1)[:, :3], rtol=0, atol=1e-12)


def test_knn_ties_to_lowest_index(kernel_path):
    xyz = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0]])
    idx, _ = K.knn(np.zeros((1, 3)), xyz, 3)
    assert idx.tolist() == [[0, 1, 2]]


def test_zbuffer_keeps_nearest_and_lowest_index(kernel_path):
    rows = np.array([0, 0, 0, 1, 5])
    cols = np.array([0, 0, 0, 1, 0])
    depth = np.array([3.0, 1.0, 1.0, 2.0, 1.0])
    valid = np.array([True, True, True, False, True])
    zbuf, owner = K.zbuffer(rows, cols, depth, valid, 2, 2)
    assert owner.tolist() == [[1, -1], [-1, -1]]
    assert zbuf[0, 0] == 1.0 and np.isinf(zbuf[1, 1])


def test_scatter_add_rows(kernel_path):
    idx = np.array([0, 2, 0, 1])
    vals = np.arange(8.0).reshape(4, 2)
    out = K.scatter_add_rows(idx, vals, 3)
    np.testing.assert_array_equal(out, [[4.0, 6.0], [6.0, 7.0], [2.0, 3.0]])


points = arrays(np.float64, st.tuples(st.integers(2, 30), st.just(3)),
                elements=st.floats(-10, 10, allow_nan=False, width=32))


@settings(max_examples=60, deadline=None)
@given(points, st.data())
def test_paths_agree(xyz, data):
    k = data.draw(st.integers(1, xyz.shape[0]))
    r = data.draw(st.floats(0.01, 5.0))
    np.testing.assert_array_equal(K._fps_numba(xyz, k, 0), K._fps_numpy(xyz, k, 0))
    np.testing.assert_array_equal(K._ball_query_numba(xyz[:3], xyz, r * r, 4),
                                  K._ball_query_numpy(xyz[:3], xyz, r * r, 4))
    kk = min(3, xyz.shape[0])
    i1, d1 = K._knn_numba(xyz, xyz, kk)
    i2, d2 = K._knn_numpy(xyz, xyz, kk)
    np.testing.assert_array_equal(i1, i2)
    np.testing.assert_array_equal(d1, d2)


@settings(max_examples=60, deadline=None)
@given(points)
def test_fps_prefix_property(xyz):
    # the first j picks of a k-sample are the j-sample
    n = xyz.shape[0]
    full = K.farthest_point_sample(xyz, n)
    for j in (1, n // 2, n):
        assert K.farthest_point_sample(xyz, max(j, 1)).tolist() == full[: max(j, 1)].tolist()


def test_env_flag_selects_numpy():
    env = dict(os.environ, XMCL_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "from xmcl import kernels; print(kernels.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
