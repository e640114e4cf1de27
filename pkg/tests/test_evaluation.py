import csv

import numpy as np
import pytest

from xmcl.data import CameraModel
from xmcl.evaluation import (MatchReport, acc_suite, histogram, match_accuracy, merge_histograms,
                             mismatch_distances, read_curve, write_curve)
from xmcl.losses import CorrespondenceBatch, TupleLayout
from xmcl.tensor import Tensor


def brute_force_accuracy(a, b):
    hits = 0
    for i in range(len(a)):
        best, best_j = -np.inf, -1
        for j in range(len(b)):
            s = float(a[i] @ b[j]) / (np.linalg.norm(a[i]) * np.linalg.norm(b[j]))
            if s > best:
                best, best_j = s, j
        hits += best_j == i
    return hits / len(a)


def test_match_accuracy_against_double_loop(rng):
    for _ in range(100):
        n, d = rng.integers(2, 20), rng.integers(1, 8)
        a = rng.standard_normal((n, d))
        b = a + rng.uniform(0, 2) * rng.standard_normal((n, d))
        acc, rec = match_accuracy(a, b)
        assert acc == brute_force_accuracy(a, b)
        assert rec.shape == (n, 4)


def test_match_accuracy_ties_and_errors():
    a = np.array([[1.0, 0], [1.0, 0]])
    acc, rec = match_accuracy(a, a)
    assert acc == 0.5 and rec[:, 1].tolist() == [0, 0]
    with pytest.raises(ValueError, match="zero-norm"):
        match_accuracy(np.zeros((2, 2)), a)
    with pytest.raises(ValueError, match="differ"):
        match_accuracy(a, np.ones((3, 2)))
    with pytest.raises(ValueError, match="at least 2"):
        match_accuracy(a[:1], a[:1])


def test_acc_suite_views(rng):
    n, layout = 12, TupleLayout(2, 3)
    base = rng.standard_normal((n, 5))
    noise = rng.standard_normal((n, 5))
    # private spans of img and pc are unrelated, shared spans coincide
    pc = np.concatenate([base[:, :2], noise[:, 2:]], axis=1)
    batch = CorrespondenceBatch(*(Tensor(x) for x in (base, base, pc, pc)))
    rep = acc_suite(batch, layout, n)
    assert rep.acc_i == rep.acc_p == rep.acc_s == 1.0
    assert rep.acc_c == brute_force_accuracy(base, pc)
    sub = acc_suite(batch, layout, 6, seed=3)
    assert sub.n_sampled == 6 and len(np.unique(sub.rows)) == 6
    with pytest.raises(ValueError):
        acc_suite(batch, layout, n + 1)


def test_histogram_bins():
    h = histogram([0.0, 0.49, 0.5, 0.99, 2.0, 12.0, 1e9], [0.5, 1.0, 10.0])
    assert h.counts.tolist() == [2, 2, 1, 2]
    assert h.low.tolist() == [0.0, 0.5, 1.0, 10.0] and h.high[-1] == np.inf
    with pytest.raises(ValueError):
        histogram([1.0], [1.0, 0.5])
    m = merge_histograms([h, h])
    assert m.total == 2 * h.total


def test_histogram_csv_reads_back(tmp_path):
    h = histogram(np.array([0.2, 3.0, 4.0]), [1.0, 2.0])
    h.to_csv(tmp_path / "mismatch_hist.csv")
    with open(tmp_path / "mismatch_hist.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["count"]) for r in rows] == [1, 0, 2]
    assert float(rows[-1]["bin_high"]) == float("inf")


def test_mismatch_distance_is_pixel_offset():
    cam = CameraModel.looking_forward(16, 16, 10.0, (0, 0, 0))
    xyz = np.array([[10.0, 0, 0], [10.0, -1.0, 0]])
    r, c = cam.cy, cam.cx
    corr = np.array([[int(r), int(c), 0], [int(r), int(c) + 1, 1]])
    rec = np.array([[0, 1, 0, 0.9], [1, 1, 1, 1.0]])
    rep = MatchReport(0.5, 0.5, 0.5, 0.5, 2, np.arange(2), {"acc_s": rec})
    d = mismatch_distances(rep, corr, xyz, cam)
    # point 1 projects one focal unit right of center; anchor 0 sits at the floored center
    assert d == pytest.approx([np.hypot(r - int(r), c + 1.0 - int(c))])


def test_curve_roundtrip(tmp_path):
    rows = [{"step": 0, "acc_i": 0.1, "acc_p": 0.2, "acc_c": 0.3, "acc_s": 1 / 3, "loss": 12.5}]
    write_curve(tmp_path / "acc_curve.csv", rows)
    assert read_curve(tmp_path / "acc_curve.csv") == rows
    with open(tmp_path / "acc_curve.csv", newline="") as fh:
        assert next(csv.reader(fh)) == ["step", "acc_i", "acc_p", "acc_c", "acc_s", "loss"]
