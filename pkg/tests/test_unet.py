import numpy as np
import pytest

from xmcl.model import gather_pixels
from xmcl.tensor import ShapeError, Tensor
from xmcl.unet import ImageArch, init_image_params, sample_pixel_features, unet_forward

ARCH = ImageArch(channels=[4, 8, 8], head=6, groups=2)


def test_output_shape_single_and_batched():
    store = init_image_params(ARCH, np.random.default_rng(0))
    img = np.random.default_rng(1).random((2, 1, 8, 12))
    batched = unet_forward(img, store, ARCH)
    assert batched.shape == (2, 6, 8, 12)
    single = unet_forward(img[1], store, ARCH)
    np.testing.assert_allclose(single.data, batched.data[1], rtol=0, atol=1e-12)


def test_divisibility_and_channel_checks():
    store = init_image_params(ARCH, np.random.default_rng(0))
    with pytest.raises(ValueError, match="divisible by 4"):
        unet_forward(np.zeros((1, 6, 8)), store, ARCH)
    with pytest.raises(ShapeError):
        unet_forward(np.zeros((2, 8, 8)), store, ARCH)
    with pytest.raises(ValueError):
        ImageArch(channels=[6], groups=4)


def test_upsampling_starts_without_checkerboard():
    store = init_image_params(ARCH, np.random.default_rng(0))
    w = store["image/dec0/up/w"].data
    assert np.all(w == w[:, :, :1, :1])


def test_sample_pixel_features_and_gather_agree():
    rng = np.random.default_rng(2)
    fmap = rng.standard_normal((3, 4, 5))
    pix = np.array([[0, 0], [3, 4], [2, 1]])
    a = sample_pixel_features(Tensor(fmap), pix).data
    np.testing.assert_array_equal(a, fmap[:, pix[:, 0], pix[:, 1]].T)
    b = gather_pixels(Tensor(fmap[None]), 0, pix).data
    np.testing.assert_array_equal(a, b)
    with pytest.raises(IndexError):
        sample_pixel_features(Tensor(fmap), [[4, 0]])
    with pytest.raises(IndexError):
        gather_pixels(Tensor(fmap[None]), 0, [[0, 5]])


def test_translation_equivariance_away_from_borders_at_stride_multiples():
    # a shift by the full downsampling factor commutes with the network in the interior
    arch = ImageArch(channels=[4, 8], head=4, groups=2)
    store = init_image_params(arch, np.random.default_rng(0))
    rng = np.random.default_rng(3)
    big = rng.random((1, 24, 24))
    a = unet_forward(big[:, :16, :16], store, arch).data
    b = unet_forward(big[:, 2:18, 2:18], store, arch).data
    # group norm statistics differ between crops, so compare normalized directions loosely
    inner_a = a[:, 6:10, 6:10].reshape(4, -1).T
    inner_b = b[:, 4:8, 4:8].reshape(4, -1).T
    cos = (inner_a * inner_b).sum(1) / np.linalg.norm(inner_a, axis=1) / np.linalg.norm(inner_b, axis=1)
    assert cos.mean() > 0.9


def test_arch_roundtrip():
    assert ImageArch.from_dict(ARCH.to_dict()) == ARCH
    assert ARCH.downsample_factor == 4
