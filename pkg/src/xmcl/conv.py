"""Convolution, transposed convolution and group normalization ops.

Inputs are ``[C, H, W]`` or batched ``[B, C, H, W]``; weights follow the
usual layouts (``[C_out, C_in, k, k]`` for conv, ``[C_in, C_out, k, k]`` for
the transposed conv).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _make


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    return x, False


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # [B, C, Hp, Wp] -> [B, Ho, Wo, C*k*k]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho, wo, c * k * k)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], k: int, stride: int) -> np.ndarray:
    # inverse scatter of _im2col: cols [B, Ho, Wo, C*k*k] -> [B, C, Hp, Wp]
    b, c, hp, wp = shape
    ho, wo = cols.shape[1:3]
    cols = np.ascontiguousarray(cols.reshape(b, ho, wo, c, k, k).transpose(4, 5, 0, 3, 1, 2))
    out = np.zeros(shape)
    for p in range(k):
        for q in range(k):
            out[:, :, p : p + stride * ho : stride, q : q + stride * wo : stride] += cols[p, q]
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding."""
    xd, squeeze = _batched(x.data)
    if w.ndim != 4 or w.shape[2] != w.shape[3] or xd.ndim != 4 or xd.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("conv2d", w.shape, b.shape, detail="bias")
    cout, cin, k, _ = w.shape
    if xd.shape[2] + 2 * padding < k or xd.shape[3] + 2 * padding < k:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, k, stride)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T  # [B, Ho, Wo, Cout]
    if b is not None:
        out = out + b.data
    out = out.transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]
    pshape = xp.shape

    def bw(g):
        gb4 = g[None] if squeeze else g
        gt = gb4.transpose(0, 2, 3, 1)  # [B, Ho, Wo, Cout]
        gx = gw = gbias = None
        if x.requires_grad:
            gcols = gt @ wmat
            gxp = _col2im(gcols, pshape, k, stride)
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            gx = gxp[0] if squeeze else gxp
        if w.requires_grad:
            gw = (gt.reshape(-1, cout).T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
        if b is not None and b.requires_grad:
            gbias = gt.reshape(-1, cout).sum(axis=0)
        return gx, gw, gbias

    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out), parents, bw, "conv2d")


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution without padding: out size ``(H-1)*stride + k``.

    With ``k == stride`` this exactly multiplies the spatial size by ``stride``.
    """
    xd, squeeze = _batched(x.data)
    if w.ndim != 4 or w.shape[2] != w.shape[3] or xd.ndim != 4 or xd.shape[1] != w.shape[0]:
        raise ShapeError("conv_transpose2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError("conv_transpose2d", w.shape, b.shape, detail="bias")
    cin, cout, k, _ = w.shape
    bsz, _, h, wd = xd.shape
    ho, wo = (h - 1) * stride + k, (wd - 1) * stride + k
    wmat = w.data.reshape(cin, cout * k * k)
    xt = xd.transpose(0, 2, 3, 1)  # [B, H, W, Cin]
    cols = xt @ wmat  # [B, H, W, Cout*k*k]
    out = _col2im(cols, (bsz, cout, ho, wo), k, stride)
    if b is not None:
        out = out + b.data[None, :, None, None]
    if squeeze:
        out = out[0]

    def bw(g):
        gb4 = g[None] if squeeze else g
        gcols = _im2col(gb4, k, stride)  # [B, H, W, Cout*k*k]
        gx = gw = gbias = None
        if x.requires_grad:
            gx = (gcols @ wmat.T).transpose(0, 3, 1, 2)
            if squeeze:
                gx = gx[0]
        if w.requires_grad:
            gw = (xt.reshape(-1, cin).T @ gcols.reshape(-1, gcols.shape[-1])).reshape(w.shape)
        if b is not None and b.requires_grad:
            gbias = gb4.sum(axis=(0, 2, 3))
        return gx, gw, gbias

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "conv_transpose2d")


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-sample group normalization with per-channel affine."""
    xd, squeeze = _batched(x.data)
    bsz, c, h, wd = xd.shape
    if c % groups or gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("group_norm", x.shape, gamma.shape, detail=f"groups={groups}")
    xg = xd.reshape(bsz, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(bsz, c, h, wd)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    if squeeze:
        out = out[0]
    n = xg.shape[2]

    def bw(g):
        gb4 = g[None] if squeeze else g
        gx = gg = gbeta = None
        if gamma.requires_grad:
            gg = (gb4 * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gbeta = gb4.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxhat = (gb4 * gamma.data[None, :, None, None]).reshape(bsz, groups, n)
            xh = xhat.reshape(bsz, groups, n)
            gx = inv * (gxhat - gxhat.mean(axis=2, keepdims=True)
                        - xh * (gxhat * xh).mean(axis=2, keepdims=True))
            gx = gx.reshape(bsz, c, h, wd)
            if squeeze:
                gx = gx[0]
        return gx, gg, gbeta

    return _make(out, (x, gamma, beta), bw, "group_norm")
