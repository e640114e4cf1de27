import numpy as np
import pytest
from PIL import Image

from xmcl.cluster import (export_label_map, grid_pixels, palette, positional_kmeans, spherical_kmeans)


def test_spherical_objective_never_decreases(rng):
    for _ in range(100):
        n, d, k = rng.integers(8, 40), rng.integers(2, 6), rng.integers(1, 6)
        x = rng.standard_normal((n, d))
        res = spherical_kmeans(x, k, 50, seed=int(rng.integers(1000)))
        assert np.all(np.diff(res.history) >= -1e-9)
        # converged assignment is a fixpoint of one more round
        again = spherical_kmeans(x, k, 50, init=res.centroids)
        if res.iterations < 50:
            np.testing.assert_array_equal(again.assignments, res.assignments)
        assert res.objective >= res.history[0] - 1e-9


def test_spherical_recovers_separated_directions(rng):
    dirs = np.eye(4)
    x = np.repeat(dirs, 10, axis=0) + 0.05 * rng.standard_normal((40, 4))
    res = spherical_kmeans(x, 4, seed=1)
    for block in res.assignments.reshape(4, 10):
        assert len(set(block)) == 1
    assert len(set(res.assignments)) == 4


def test_spherical_k_too_large():
    with pytest.raises(ValueError, match="distinct"):
        spherical_kmeans(np.ones((5, 3)), 2)
    with pytest.raises(ValueError, match="zero-norm"):
        spherical_kmeans(np.vstack([np.ones((5, 3)), np.zeros((2, 3))]), 2)


def lloyd_reference(p, cent, iters):
    for _ in range(iters):
        a = np.argmin(((p[:, None] - cent[None]) ** 2).sum(-1), axis=1)
        cent = np.array([p[a == j].mean(0) if np.any(a == j) else cent[j] for j in range(len(cent))])
    return np.argmin(((p[:, None] - cent[None]) ** 2).sum(-1), axis=1)


def test_positional_matches_plain_lloyd(rng):
    p = grid_pixels(12, 16).astype(float)
    for _ in range(20):
        init = p[rng.choice(len(p), 5, replace=False)]
        res = positional_kmeans(p, 5, init=init, max_iters=200)
        np.testing.assert_array_equal(res.assignments, lloyd_reference(p, init.copy(), 200))
        assert np.all(np.diff(res.history) <= 1e-9)


def test_palette_distinct_and_deterministic():
    a = palette(16, 3)
    assert len({tuple(c) for c in a}) == 16
    np.testing.assert_array_equal(a, palette(16, 3))


def test_ppm_parses_with_independent_reader(tmp_path, rng):
    labels = rng.integers(0, 16, 6 * 10)
    export_label_map(labels, (6, 10), tmp_path / "m.ppm", palette_seed=2, n_labels=16)
    with Image.open(tmp_path / "m.ppm") as im:
        assert im.mode == "RGB" and im.size == (10, 6)
        arr = np.array(im)
    np.testing.assert_array_equal(arr, palette(16, 2)[labels.reshape(6, 10)])


def test_point_labels_text(tmp_path, rng):
    xyz = rng.standard_normal((7, 3))
    labels = rng.integers(0, 4, 7)
    export_label_map(labels, xyz, tmp_path / "p.txt")
    back = np.loadtxt(tmp_path / "p.txt")
    np.testing.assert_array_equal(back[:, :3], xyz)
    np.testing.assert_array_equal(back[:, 3], labels)
    with pytest.raises(ValueError):
        export_label_map(labels[:3], xyz, tmp_path / "q.txt")
