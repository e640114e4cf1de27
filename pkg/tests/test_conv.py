import numpy as np
import pytest
from scipy.signal import correlate

from xmcl.conv import conv2d, conv_transpose2d, group_norm
from xmcl.tensor import ShapeError, Tensor


def conv_oracle(x, w, b, stride, pad):
    # valid cross-correlation per (out, in) pair via scipy, then strided
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out = np.stack([sum(correlate(xp[ci], w[co, ci], mode="valid") for ci in range(x.shape[0]))
                    for co in range(w.shape[0])])
    return out[:, ::stride, ::stride] + b[:, None, None]


def convt_oracle(x, w, b, stride):
    cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    out = np.zeros((cout, (h - 1) * stride + k, (wd - 1) * stride + k))
    for ci in range(cin):
        for i in range(h):
            for j in range(wd):
                out[:, i * stride : i * stride + k, j * stride : j * stride + k] += x[ci, i, j] * w[ci]
    return out + b[:, None, None]


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 0, 1), (1, 2, 5)])
def test_conv2d_matches_scipy(rng, stride, pad, k):
    x = rng.standard_normal((3, 7, 9))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(out, conv_oracle(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv2d_batched_equals_per_sample(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((2, 3, 3, 3))
    batched = conv2d(Tensor(x), Tensor(w), padding=1).data
    for i in range(2):
        np.testing.assert_array_equal(batched[i], conv2d(Tensor(x[i]), Tensor(w), padding=1).data)


@pytest.mark.parametrize("stride,k", [(2, 2), (2, 3), (1, 2)])
def test_conv_transpose_matches_scatter_oracle(rng, stride, k):
    x = rng.standard_normal((3, 4, 5))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(2)
    out = conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), stride).data
    np.testing.assert_allclose(out, convt_oracle(x, w, b, stride), rtol=1e-12, atol=1e-12)


def test_conv_transpose_is_adjoint_of_conv(rng):
    # <conv(x), y> == <x, convT(y)> for the same weights and no bias
    x = rng.standard_normal((2, 8, 8))
    w = rng.standard_normal((3, 2, 2, 2))
    y = rng.standard_normal((3, 4, 4))
    lhs = (conv2d(Tensor(x), Tensor(w), stride=2).data * y).sum()
    rhs = (x * conv_transpose2d(Tensor(y), Tensor(w), stride=2).data).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_group_norm_matches_formula(rng):
    x = rng.standard_normal((2, 4, 3, 5)) * 3 + 1
    g, b = rng.standard_normal(4), rng.standard_normal(4)
    out = group_norm(Tensor(x), Tensor(g), Tensor(b), groups=2).data
    xg = x.reshape(2, 2, -1)
    ref = ((xg - xg.mean(2, keepdims=True)) / np.sqrt(xg.var(2, keepdims=True) + 1e-5)).reshape(x.shape)
    np.testing.assert_allclose(out, ref * g[None, :, None, None] + b[None, :, None, None], rtol=1e-12, atol=1e-12)


def test_shape_errors():
    with pytest.raises(ShapeError, match="conv2d"):
        conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError, match="kernel larger"):
        conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ShapeError, match="group_norm"):
        group_norm(Tensor(np.zeros((3, 2, 2))), Tensor(np.ones(3)), Tensor(np.zeros(3)), groups=2)
