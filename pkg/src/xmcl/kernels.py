"""Hot geometric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``XMCL_DISABLE_NUMBA`` is unset or ``0``. Both paths return
identical results (same tie-breaking, same dtypes); tests run both.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("XMCL_DISABLE_NUMBA", "0") not in ("", "0", "false", "False")

try:
    if _DISABLED:
        raise ImportError("numba disabled by XMCL_DISABLE_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f


# --------------------------------------------------------------------------
# farthest point sampling
# --------------------------------------------------------------------------

@njit(cache=True)
def _fps_numba(xyz, k, seed_index):
    n = xyz.shape[0]
    out = np.empty(k, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = seed_index
    for s in range(k):
        out[s] = cur
        best = -1.0
        best_i = 0
        cx = xyz[cur, 0]
        cy = xyz[cur, 1]
        cz = xyz[cur, 2]
        for i in range(n):
            dx = xyz[i, 0] - cx
            dy = xyz[i, 1] - cy
            dz = xyz[i, 2] - cz
            d = dx * dx + dy * dy + dz * dz
            if d < mind[i]:
                mind[i] = d
            if mind[i] > best:
                best = mind[i]
                best_i = i
        cur = best_i
    return out


def _fps_numpy(xyz, k, seed_index):
    n = xyz.shape[0]
    out = np.empty(k, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = seed_index
    for s in range(k):
        out[s] = cur
        diff = xyz - xyz[cur]
        d = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        np.minimum(mind, d, out=mind)
        cur = int(np.argmax(mind))
    return out


def farthest_point_sample(xyz: np.ndarray, k: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min sampling of ``k`` indices starting at ``seed_index``.

    Ties go to the lowest index. Already-selected points have distance 0, so
    once every point is selected the order is exhaustive.
    """
    xyz = np.ascontiguousarray(xyz, dtype=np.float64)
    n = xyz.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"farthest_point_sample: need 1 <= k <= P, got k={k}, P={n}")
    if not 0 <= seed_index < n:
        raise ValueError(f"farthest_point_sample: seed_index {seed_index} out of range for P={n}")
    if HAS_NUMBA:
        return _fps_numba(xyz, int(k), int(seed_index))
    return _fps_numpy(xyz, int(k), int(seed_index))


# --------------------------------------------------------------------------
# ball query
# --------------------------------------------------------------------------

@njit(cache=True)
def _ball_query_numba(centers, xyz, r2, k_max):
    m = centers.shape[0]
    n = xyz.shape[0]
    out = np.empty((m, k_max), dtype=np.int64)
    for c in range(m):
        cnt = 0
        nearest = 0
        nearest_d = np.inf
        for i in range(n):
            dx = xyz[i, 0] - centers[c, 0]
            dy = xyz[i, 1] - centers[c, 1]
            dz = xyz[i, 2] - centers[c, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < nearest_d:
                nearest_d = d
                nearest = i
            if d <= r2 and cnt < k_max:
                out[c, cnt] = i
                cnt += 1
        if cnt == 0:
            for j in range(k_max):
                out[c, j] = nearest
        else:
            for j in range(cnt, k_max):
                out[c, j] = out[c, 0]
    return out


def _ball_query_numpy(centers, xyz, r2, k_max):
    d = ((centers[:, None, :] - xyz[None, :, :]) ** 2).sum(-1)
    m = centers.shape[0]
    out = np.empty((m, k_max), dtype=np.int64)
    for c in range(m):
        hits = np.flatnonzero(d[c] <= r2)[:k_max]
        if hits.size == 0:
            out[c, :] = int(np.argmin(d[c]))
        else:
            out[c, : hits.size] = hits
            out[c, hits.size:] = hits[0]
    return out


def ball_query(centers: np.ndarray, xyz: np.ndarray, radius: float, k_max: int) -> np.ndarray:
    """Neighbour indices within ``radius`` of each center, shape ``[M, k_max]``.

    Hits are listed in ascending index order and truncated to ``k_max``;
    short lists are padded with the first hit. A center with no hit gets its
    nearest point in every slot.
    """
    if radius <= 0:
        raise ValueError(f"ball_query: radius must be > 0, got {radius}")
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    xyz = np.ascontiguousarray(xyz, dtype=np.float64)
    r2 = float(radius) * float(radius)
    if HAS_NUMBA:
        return _ball_query_numba(centers, xyz, r2, int(k_max))
    return _ball_query_numpy(centers, xyz, r2, int(k_max))


# --------------------------------------------------------------------------
# k nearest neighbours (k <= 3 in practice)
# --------------------------------------------------------------------------

@njit(cache=True)
def _knn_numba(queries, xyz, k):
    m = queries.shape[0]
    n = xyz.shape[0]
    idx = np.empty((m, k), dtype=np.int64)
    dist = np.empty((m, k))
    for q in range(m):
        for j in range(k):
            idx[q, j] = -1
            dist[q, j] = np.inf
        for i in range(n):
            dx = xyz[i, 0] - queries[q, 0]
            dy = xyz[i, 1] - queries[q, 1]
            dz = xyz[i, 2] - queries[q, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < dist[q, k - 1]:
                # insertion keeps earlier (lower) indices ahead on ties
                j = k - 1
                while j > 0 and dist[q, j - 1] > d:
                    dist[q, j] = dist[q, j - 1]
                    idx[q, j] = idx[q, j - 1]
                    j -= 1
                dist[q, j] = d
                idx[q, j] = i
    return idx, dist


def _knn_numpy(queries, xyz, k):
    d = ((queries[:, None, :] - xyz[None, :, :]) ** 2).sum(-1)
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    return idx.astype(np.int64), np.take_along_axis(d, idx, axis=1)


def knn(queries: np.ndarray, xyz: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and squared distances of the ``k`` nearest points, ties to lowest index."""
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    xyz = np.ascontiguousarray(xyz, dtype=np.float64)
    if not 1 <= k <= xyz.shape[0]:
        raise ValueError(f"knn: need 1 <= k <= {xyz.shape[0]}, got {k}")
    if HAS_NUMBA:
        return _knn_numba(queries, xyz, int(k))
    return _knn_numpy(queries, xyz, int(k))


# --------------------------------------------------------------------------
# point z-buffer
# --------------------------------------------------------------------------

@njit(cache=True)
def _zbuffer_numba(rows, cols, depth, valid, height, width):
    zbuf = np.full((height, width), np.inf)
    owner = np.full((height, width), -1, dtype=np.int64)
    for i in range(rows.shape[0]):
        if not valid[i]:
            continue
        r = rows[i]
        c = cols[i]
        if r < 0 or r >= height or c < 0 or c >= width:
            continue
        if depth[i] < zbuf[r, c]:
            zbuf[r, c] = depth[i]
            owner[r, c] = i
    return zbuf, owner


def _zbuffer_numpy(rows, cols, depth, valid, height, width):
    zbuf = np.full((height, width), np.inf)
    owner = np.full((height, width), -1, dtype=np.int64)
    keep = valid & (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    cand = np.flatnonzero(keep)
    # sort by depth then index; first occurrence per pixel wins
    order = cand[np.lexsort((cand, depth[cand]))]
    flat = rows[order] * width + cols[order]
    _, first = np.unique(flat, return_index=True)
    win = order[first]
    zbuf[rows[win], cols[win]] = depth[win]
    owner[rows[win], cols[win]] = win
    return zbuf, owner


def zbuffer(rows, cols, depth, valid, height: int, width: int):
    """Nearest-depth point per pixel. Returns ``(zbuf, owner)``; ties go to the lowest index."""
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    cols = np.ascontiguousarray(cols, dtype=np.int64)
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    valid = np.ascontiguousarray(valid, dtype=np.bool_)
    if HAS_NUMBA:
        return _zbuffer_numba(rows, cols, depth, valid, int(height), int(width))
    return _zbuffer_numpy(rows, cols, depth, valid, int(height), int(width))


# --------------------------------------------------------------------------
# scatter-add of rows (gradient of gathers)
# --------------------------------------------------------------------------

@njit(cache=True)
def _scatter_rows_numba(idx, values, n_rows):
    out = np.zeros((n_rows, values.shape[1]))
    for i in range(idx.shape[0]):
        r = idx[i]
        for j in range(values.shape[1]):
            out[r, j] += values[i, j]
    return out


def _scatter_rows_numpy(idx, values, n_rows):
    out = np.zeros((n_rows, values.shape[1]))
    np.add.at(out, idx, values)
    return out


def scatter_add_rows(idx: np.ndarray, values: np.ndarray, n_rows: int) -> np.ndarray:
    """``out[idx[i]] += values[i]`` for a flat index and 2-D values."""
    idx = np.ascontiguousarray(idx, dtype=np.int64)
    values = np.ascontiguousarray(values, dtype=np.float64)
    if HAS_NUMBA:
        return _scatter_rows_numba(idx, values, int(n_rows))
    return _scatter_rows_numpy(idx, values, int(n_rows))


def backend() -> str:
    return "numba" if HAS_NUMBA else "numpy"
