"""Matching accuracies (ACC_I / ACC_P / ACC_C / ACC_S) and mismatch statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CameraModel, project_points
from .losses import CorrespondenceBatch, TupleLayout

METRICS = ("acc_i", "acc_p", "acc_c", "acc_s")


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise ValueError(f"match_accuracy: zero-norm row in {what}")
    return x / norms


def match_accuracy(anchors: np.ndarray, candidates: np.ndarray) -> tuple[float, np.ndarray]:
    """Fraction of anchors whose most cosine-similar candidate is their own row.

    Returns ``(accuracy, records)`` with records ``[N, 4]`` of
    ``(anchor, predicted, truth, similarity)``; ties go to the lowest index.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64)
    if anchors.shape != candidates.shape or anchors.ndim != 2:
        raise ValueError(f"match_accuracy: shapes {anchors.shape} and {candidates.shape} differ")
    n = anchors.shape[0]
    if n < 2:
        raise ValueError("match_accuracy needs at least 2 rows")
    sims = _unit_rows(anchors, "anchors") @ _unit_rows(candidates, "candidates").T
    pred = np.argmax(sims, axis=1)
    truth = np.arange(n)
    records = np.stack([truth, pred, truth, sims[truth, pred]], axis=1)
    return float(np.count_nonzero(pred == truth)) / n, records


@dataclass
class MatchReport:
    acc_i: float
    acc_p: float
    acc_c: float
    acc_s: float
    n_sampled: int
    rows: np.ndarray  # batch rows that were sampled
    records: dict[str, np.ndarray] = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}


def acc_suite(batch: CorrespondenceBatch, layout: TupleLayout, n_sample: int, seed: int = 0) -> MatchReport:
    """All four accuracies on ``n_sample`` rows drawn without replacement."""
    n = batch.n
    if n_sample > n:
        raise ValueError(f"acc_suite: n_sample {n_sample} > available {n}")
    rows = np.arange(n) if n_sample == n else np.sort(
        np.random.default_rng(seed).choice(n, size=n_sample, replace=False))
    img, img_aug, pc, pc_aug = (t.data[rows] for t in (batch.img, batch.img_aug, batch.pc, batch.pc_aug))
    sh = slice(0, layout.d_sh)
    out = {}
    recs = {}
    for name, (a, b) in {
        "acc_i": (img, img_aug),
        "acc_p": (pc, pc_aug),
        "acc_c": (img, pc),
        "acc_s": (img[:, sh], pc[:, sh]),
    }.items():
        out[name], recs[name] = match_accuracy(a, b)
    return MatchReport(n_sampled=n_sample, rows=rows, records=recs, **out)


def mean_reports(reports: list[MatchReport]) -> dict[str, float]:
    return {m: float(np.mean([getattr(r, m) for r in reports])) for m in METRICS}


# --------------------------------------------------------------------------
# mismatch distances
# --------------------------------------------------------------------------

@dataclass
class Histogram:
    low: np.ndarray
    high: np.ndarray
    counts: np.ndarray
    distances: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_low", "bin_high", "count"])
            for lo, hi, c in zip(self.low, self.high, self.counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def mismatch_distances(report: MatchReport, correspondences: np.ndarray, xyz: np.ndarray,
                       cam: CameraModel, metric: str = "acc_s") -> np.ndarray:
    """Pixel distance from each wrongly matched point's projection to the anchor's true pixel.

    ``correspondences[i] = (row, col, point_index)`` for batch row ``i``.
    """
    if metric not in report.records:
        raise ValueError(f"report has no {metric} records")
    rec = report.records[metric]
    corr = np.asarray(correspondences, dtype=np.int64)
    wrong = rec[:, 1] != rec[:, 2]
    if not wrong.any():
        return np.zeros(0)
    rows = report.rows
    anchor_rows = rows[rec[wrong, 0].astype(np.int64)]
    pred_rows = rows[rec[wrong, 1].astype(np.int64)]
    if anchor_rows.max() >= len(corr) or pred_rows.max() >= len(corr):
        raise ValueError("mismatch_distances: correspondence list shorter than the batch")
    r, c, depth = project_points(xyz[corr[pred_rows, 2]], cam)
    if np.any(depth <= 0):
        raise ValueError("mismatch_distances: predicted point projects behind the camera")
    return np.hypot(r - corr[anchor_rows, 0], c - corr[anchor_rows, 1])


def histogram(distances: np.ndarray, bin_edges) -> Histogram:
    """Bins ``[0, e1), [e1, e2), ..., [e_last, inf)``."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    if np.any(np.diff(edges) <= 0) or (edges.size and edges[0] <= 0):
        raise ValueError(f"bin edges must be positive and increasing, got {bin_edges}")
    low = np.concatenate([[0.0], edges])
    high = np.concatenate([edges, [math.inf]])
    d = np.asarray(distances, dtype=np.float64)
    counts = np.array([np.count_nonzero((d >= lo) & (d < hi)) for lo, hi in zip(low, high)], dtype=np.int64)
    return Histogram(low, high, counts, d)


def mismatch_pixel_histogram(report: MatchReport, correspondences: np.ndarray, xyz: np.ndarray,
                             cam: CameraModel, bin_edges, metric: str = "acc_s") -> Histogram:
    return histogram(mismatch_distances(report, correspondences, xyz, cam, metric), bin_edges)


def merge_histograms(hists: list[Histogram]) -> Histogram:
    h0 = hists[0]
    return Histogram(h0.low, h0.high, np.sum([h.counts for h in hists], axis=0),
                     np.concatenate([h.distances for h in hists]))


# --------------------------------------------------------------------------
# CSV curves
# --------------------------------------------------------------------------

CURVE_HEADER = ["step", "acc_i", "acc_p", "acc_c", "acc_s", "loss"]


def write_curve(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_HEADER)
        for r in rows:
            w.writerow([int(r["step"])] + [repr(float(r[k])) for k in CURVE_HEADER[1:]])


def read_curve(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in rd]
