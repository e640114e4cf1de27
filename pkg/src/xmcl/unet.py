"""Residual U-Net producing a dense per-pixel feature map."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .conv import conv2d, conv_transpose2d, group_norm
from .optim import ParamStore, he_normal
from .tensor import ShapeError, Tensor


@dataclass
class ImageArch:
    channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    blocks: int = 1
    head: int = 32
    in_channels: int = 1
    groups: int = 4

    def __post_init__(self):
        if len(self.channels) < 1 or self.blocks < 1:
            raise ValueError("ImageArch needs at least one stage and one block per stage")
        for c in self.channels:
            if c % self.groups:
                raise ValueError(f"ImageArch: channel count {c} not divisible by groups={self.groups}")

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.channels) - 1)

    @classmethod
    def from_dict(cls, d: dict) -> "ImageArch":
        unknown = set(d) - {"channels", "blocks", "head", "in_channels", "groups"}
        if unknown:
            raise ValueError(f"image arch: unknown keys {sorted(unknown)}")
        return cls(
            channels=list(d.get("channels", [16, 32, 64, 128])),
            blocks=d.get("blocks", 1),
            head=d.get("head", 32),
            in_channels=d.get("in_channels", 1),
            groups=d.get("groups", 4),
        )

    def to_dict(self) -> dict:
        return {"channels": self.channels, "blocks": self.blocks, "head": self.head,
                "in_channels": self.in_channels, "groups": self.groups}


HEAD_BIAS_STD = 0.1


def _add_conv(store: ParamStore, prefix: str, cin: int, cout: int, k: int, rng) -> None:
    store.add(f"{prefix}/w", he_normal(rng, (cout, cin, k, k), cin * k * k))
    store.add(f"{prefix}/b", np.zeros(cout))


def _add_norm(store: ParamStore, prefix: str, c: int) -> None:
    store.add(f"{prefix}/g", np.ones(c))
    store.add(f"{prefix}/b", np.zeros(c))


def add_res_block(store: ParamStore, prefix: str, cin: int, cout: int, stride: int, rng) -> None:
    _add_conv(store, f"{prefix}/conv1", cin, cout, 3, rng)
    _add_norm(store, f"{prefix}/norm1", cout)
    _add_conv(store, f"{prefix}/conv2", cout, cout, 3, rng)
    _add_norm(store, f"{prefix}/norm2", cout)
    if cin != cout or stride != 1:
        _add_conv(store, f"{prefix}/proj", cin, cout, 1, rng)


def init_image_params(arch: ImageArch, rng: np.random.Generator, store: ParamStore | None = None,
                      prefix: str = "image") -> ParamStore:
    store = ParamStore() if store is None else store
    ch = arch.channels
    _add_conv(store, f"{prefix}/stem", arch.in_channels, ch[0], 3, rng)
    _add_norm(store, f"{prefix}/stem_norm", ch[0])
    for s, c in enumerate(ch):
        cin = ch[0] if s == 0 else ch[s - 1]
        for k in range(arch.blocks):
            stride = 2 if (s > 0 and k == 0) else 1
            add_res_block(store, f"{prefix}/enc{s}/b{k}", cin if k == 0 else c, c, stride, rng)
    for s in range(len(ch) - 2, -1, -1):
        c = ch[s]
        # all four taps start equal (nearest-neighbour upsampling followed by a 1x1 map),
        # so the initial decoder carries no 2x2 checkerboard
        tap = he_normal(rng, (ch[s + 1], c, 1, 1), ch[s + 1])
        store.add(f"{prefix}/dec{s}/up/w", np.tile(tap, (1, 1, 2, 2)))
        store.add(f"{prefix}/dec{s}/up/b", np.zeros(c))
        for k in range(arch.blocks):
            add_res_block(store, f"{prefix}/dec{s}/b{k}", 2 * c if k == 0 else c, c, 1, rng)
    store.add(f"{prefix}/head/w", he_normal(rng, (arch.head, ch[0], 1, 1), ch[0]))
    # a pixel whose inputs are all dead relus would otherwise emit an exact zero vector
    store.add(f"{prefix}/head/b", HEAD_BIAS_STD * rng.standard_normal(arch.head))
    return store


def res_block(x: Tensor, store: ParamStore, prefix: str, stride: int = 1, groups: int = 4) -> Tensor:
    """conv-norm-relu-conv-norm plus identity/projected skip, then relu."""
    h = conv2d(x, store[f"{prefix}/conv1/w"], store[f"{prefix}/conv1/b"], stride=stride, padding=1)
    h = T.relu(group_norm(h, store[f"{prefix}/norm1/g"], store[f"{prefix}/norm1/b"], groups))
    h = conv2d(h, store[f"{prefix}/conv2/w"], store[f"{prefix}/conv2/b"], stride=1, padding=1)
    h = group_norm(h, store[f"{prefix}/norm2/g"], store[f"{prefix}/norm2/b"], groups)
    if f"{prefix}/proj/w" in store:
        skip = conv2d(x, store[f"{prefix}/proj/w"], store[f"{prefix}/proj/b"], stride=stride)
    else:
        skip = x
    return T.relu(T.add(h, skip))


def unet_forward(img: Tensor | np.ndarray, store: ParamStore, arch: ImageArch, prefix: str = "image") -> Tensor:
    """Dense features ``[D, H, W]`` (or ``[B, D, H, W]`` for batched input)."""
    if not isinstance(img, Tensor):
        img = Tensor(img)
    h, w = img.shape[-2:]
    f = arch.downsample_factor
    if img.ndim not in (3, 4) or img.shape[-3] != arch.in_channels:
        raise ShapeError("unet_forward", img.shape, (arch.in_channels, "H", "W"))
    if h % f or w % f:
        raise ValueError(f"unet_forward: image size {h}x{w} not divisible by {f}")
    g = arch.groups
    x = conv2d(img, store[f"{prefix}/stem/w"], store[f"{prefix}/stem/b"], padding=1)
    x = T.relu(group_norm(x, store[f"{prefix}/stem_norm/g"], store[f"{prefix}/stem_norm/b"], g))
    skips = []
    for s in range(len(arch.channels)):
        for k in range(arch.blocks):
            stride = 2 if (s > 0 and k == 0) else 1
            x = res_block(x, store, f"{prefix}/enc{s}/b{k}", stride, g)
        skips.append(x)
    chan_axis = x.ndim - 3
    for s in range(len(arch.channels) - 2, -1, -1):
        x = conv_transpose2d(x, store[f"{prefix}/dec{s}/up/w"], store[f"{prefix}/dec{s}/up/b"], stride=2)
        x = T.concat([x, skips[s]], axis=chan_axis)
        for k in range(arch.blocks):
            x = res_block(x, store, f"{prefix}/dec{s}/b{k}", 1, g)
    return conv2d(x, store[f"{prefix}/head/w"], store[f"{prefix}/head/b"])


def sample_pixel_features(fmap: Tensor, pixels) -> Tensor:
    """Gather feature vectors at ``(row, col)`` pixels from a ``[D, H, W]`` map -> ``[N, D]``."""
    pix = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    d, h, w = fmap.shape
    if pix.size and (pix[:, 0].min() < 0 or pix[:, 0].max() >= h or pix[:, 1].min() < 0 or pix[:, 1].max() >= w):
        raise IndexError(f"sample_pixel_features: pixel out of bounds for {h}x{w} map")
    flat = T.transpose(T.reshape(fmap, (d, h * w)))
    return T.take_rows(flat, pix[:, 0] * w + pix[:, 1])
