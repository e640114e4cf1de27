"""Image and point encoders sharing one parameter store, plus batch assembly."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import AugmentedPair, sample_rows
from .losses import CorrespondenceBatch
from .optim import ParamStore
from .pointnet import PointArch, build_geometry, init_point_params, point_net_forward
from .tensor import Tensor
from .unet import ImageArch, init_image_params, unet_forward


class DualEncoder:
    """U-Net for images and PointNet++/ASFP for clouds, both emitting ``D`` features."""

    def __init__(self, image_arch: ImageArch, point_arch: PointArch, seed: int = 0):
        if image_arch.head != point_arch.head:
            raise ValueError(f"encoder widths differ: image {image_arch.head}, point {point_arch.head}")
        self.image_arch = image_arch
        self.point_arch = point_arch
        img_ss, pt_ss = np.random.SeedSequence(seed).spawn(2)
        self.params = ParamStore()
        init_image_params(image_arch, np.random.default_rng(img_ss), self.params)
        init_point_params(point_arch, np.random.default_rng(pt_ss), self.params)

    @property
    def dim(self) -> int:
        return self.image_arch.head

    def image_features(self, images: np.ndarray) -> Tensor:
        """``[B, C, H, W]`` images -> ``[B, D, H, W]`` feature maps."""
        return unet_forward(Tensor(images), self.params, self.image_arch)

    def point_features(self, xyz: np.ndarray, attrs: np.ndarray) -> Tensor:
        geom = build_geometry(xyz, self.point_arch)
        return point_net_forward(Tensor(attrs), geom, self.params, self.point_arch)


def gather_pixels(fmaps: Tensor, batch_index: int, pixels: np.ndarray) -> Tensor:
    """Rows ``fmaps[b, :, r, c]`` for ``(r, c)`` in ``pixels`` -> ``[N, D]``."""
    b, d, h, w = fmaps.shape
    pix = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    if pix.size and (pix.min() < 0 or pix[:, 0].max() >= h or pix[:, 1].max() >= w):
        raise IndexError(f"gather_pixels: pixel out of bounds for {h}x{w} map")
    flat = T.reshape(T.transpose(fmaps, (0, 2, 3, 1)), (b * h * w, d))
    return T.take_rows(flat, batch_index * h * w + pix[:, 0] * w + pix[:, 1])


def make_batch(pair: AugmentedPair, n: int, seed: int, encoder: DualEncoder):
    """Sample ``n`` surviving correspondences and gather the four feature views.

    Returns the batch and the ``[n, 6]`` correspondence rows it was built from.
    """
    rows = sample_rows(len(pair.surviving), n, seed)
    s = pair.surviving[rows]
    fmaps = encoder.image_features(np.stack([pair.sample.image, pair.img_aug]))
    img = gather_pixels(fmaps, 0, s[:, 0:2])
    img_aug = gather_pixels(fmaps, 1, s[:, 3:5])
    pc_all = encoder.point_features(pair.sample.xyz, pair.sample.attrs)
    pc_aug_all = encoder.point_features(pair.xyz_aug, pair.attrs_aug)
    pc = T.take_rows(pc_all, s[:, 2])
    pc_aug = T.take_rows(pc_aug_all, s[:, 5])
    return CorrespondenceBatch(img, img_aug, pc, pc_aug), s
