"""Cosine (spherical) k-means, positional k-means and label-map export."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class ClusterResult:
    assignments: np.ndarray
    centroids: np.ndarray
    objective: float
    iterations: int
    history: list[float] = field(default_factory=list)


def _normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise ValueError("spherical_kmeans: zero-norm row")
    return x / norms


def _distinct_rows(x: np.ndarray) -> np.ndarray:
    _, first = np.unique(x, axis=0, return_index=True)
    return np.sort(first)


def spherical_kmeans(data: np.ndarray, k: int, max_iters: int = 100, seed: int = 0,
                     init: np.ndarray | None = None) -> ClusterResult:
    """k-means on the unit sphere with cosine-similarity assignment.

    The objective is the summed cosine similarity of each row to its centroid
    and never decreases across iterations. An emptied cluster is reseeded with
    the row least similar to its current centroid.
    """
    x = _normalize(np.asarray(data, dtype=np.float64))
    distinct = _distinct_rows(x)
    if not 1 <= k <= len(distinct):
        raise ValueError(f"spherical_kmeans: k={k} exceeds {len(distinct)} distinct nonzero rows")
    if init is None:
        rng = np.random.default_rng(seed)
        cent = x[np.sort(rng.choice(distinct, size=k, replace=False))]
    else:
        cent = _normalize(np.asarray(init, dtype=np.float64))
    assign = None
    history: list[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        sims = x @ cent.T
        new_assign = np.argmax(sims, axis=1)
        history.append(float(sims[np.arange(len(x)), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        own = sims[np.arange(len(x)), assign]
        taken: set[int] = set()
        for j in range(k):
            members = assign == j
            s = x[members].sum(axis=0)
            norm = np.linalg.norm(s)
            if members.any() and norm > 1e-12:
                cent[j] = s / norm
            else:
                order = np.argsort(own, kind="stable")
                pick = next(int(i) for i in order if int(i) not in taken)
                taken.add(pick)
                cent[j] = x[pick]
    sims = x @ cent.T
    assign = np.argmax(sims, axis=1)
    obj = float(sims[np.arange(len(x)), assign].sum())
    return ClusterResult(assign, cent, obj, it, history)


def positional_kmeans(pixels: np.ndarray, k: int, seed: int = 0, max_iters: int = 100,
                      init: np.ndarray | None = None) -> ClusterResult:
    """Plain Lloyd iterations on 2-D positions; objective is the summed squared distance."""
    p = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if not 1 <= k <= len(p):
        raise ValueError(f"positional_kmeans: k={k} exceeds {len(p)} pixels")
    if init is None:
        rng = np.random.default_rng(seed)
        cent = p[np.sort(rng.choice(len(p), size=k, replace=False))].copy()
    else:
        cent = np.asarray(init, dtype=np.float64).reshape(k, 2).copy()
    assign = None
    history: list[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        d2 = ((p[:, None, :] - cent[None]) ** 2).sum(-1)
        new_assign = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(p)), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        own = d2[np.arange(len(p)), assign]
        for j in range(k):
            members = assign == j
            if members.any():
                cent[j] = p[members].mean(axis=0)
            else:
                far = int(np.argmax(own))
                cent[j] = p[far]
                own[far] = -1.0
    d2 = ((p[:, None, :] - cent[None]) ** 2).sum(-1)
    assign = np.argmin(d2, axis=1)
    return ClusterResult(assign, cent, float(d2[np.arange(len(p)), assign].sum()), it, history)


def grid_pixels(height: int, width: int) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------

def palette(k: int, seed: int = 0) -> np.ndarray:
    """``k`` distinct RGB colors, deterministic in ``seed``."""
    if k > 1 << 24:
        raise ValueError("palette: too many labels")
    codes = np.random.default_rng(seed).choice(1 << 24, size=k, replace=False)
    return np.stack([(codes >> 16) & 255, (codes >> 8) & 255, codes & 255], axis=1).astype(np.uint8)


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write label map {path}: {exc.strerror}") from exc


def export_image_labels(labels: np.ndarray, height: int, width: int, path: str | Path,
                        palette_seed: int = 0, n_labels: int | None = None) -> None:
    lab = np.asarray(labels, dtype=np.int64).reshape(height, width)
    k = int(lab.max()) + 1 if n_labels is None else n_labels
    write_ppm(path, palette(k, palette_seed)[lab])


def export_point_labels(labels: np.ndarray, xyz: np.ndarray, path: str | Path) -> None:
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(lab) != len(xyz):
        raise ValueError(f"export_point_labels: {len(lab)} labels for {len(xyz)} points")
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for (x, y, z), l in zip(xyz, lab):
                fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r} {int(l)}\n")
    except OSError as exc:
        raise OSError(f"cannot write label file {path}: {exc.strerror}") from exc


def export_label_map(assignments: np.ndarray, geometry, path: str | Path, palette_seed: int = 0,
                     n_labels: int | None = None) -> None:
    """Image geometry ``(height, width)`` -> PPM; point geometry ``[P, 3]`` -> text lines."""
    if isinstance(geometry, tuple) and len(geometry) == 2:
        export_image_labels(assignments, geometry[0], geometry[1], path, palette_seed, n_labels)
    else:
        export_point_labels(assignments, np.asarray(geometry), path)
