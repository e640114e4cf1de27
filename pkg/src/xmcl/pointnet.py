"""PointNet++-style point encoder with multi-scale grouping and ASFP decoder.

The geometric part of a forward pass (sampling, grouping, neighbour search)
depends only on coordinates, so it is computed once per cloud as a
:class:`CloudGeometry` and reused for every feature evaluation. Only the
features and parameters are differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .optim import ParamStore, he_normal
from .tensor import ShapeError, Tensor

COINCIDENT = 1e-10


@dataclass
class SAConfig:
    n_out: int
    radii: list[float]
    k_max: int
    mlp_widths: list[int]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.radii, self.radii[1:])):
            raise ValueError(f"SAConfig radii must be strictly increasing, got {self.radii}")
        if not self.radii or any(r <= 0 for r in self.radii):
            raise ValueError("SAConfig needs positive radii")
        if not self.mlp_widths or any(w < 1 for w in self.mlp_widths):
            raise ValueError(f"SAConfig widths must be >= 1, got {self.mlp_widths}")
        if self.n_out < 1 or self.k_max < 1:
            raise ValueError("SAConfig n_out and k_max must be >= 1")

    @property
    def out_width(self) -> int:
        return len(self.radii) * self.mlp_widths[-1]


HEAD_BIAS_STD = 0.1

POINT_ARCH_KEYS = {"n_out", "radii", "mlp", "k_max", "decoder", "head", "in_attrs", "asfp", "asfp_radii",
                   "asfp_k_max", "asfp_mlp", "fps_seed", "use_xyz"}


@dataclass
class PointArch:
    """Encoder levels are listed fine to coarse; decoder levels coarse to fine."""

    sa: list[SAConfig]
    decoder_widths: list[list[int]]
    head: int = 32
    in_attrs: int = 1
    asfp: bool = True
    asfp_radii: list[float] = field(default_factory=list)
    asfp_k_max: int = 16
    asfp_widths: list[list[int]] = field(default_factory=list)
    fps_seed: int = 0
    use_xyz: bool = False  # append absolute coordinates to the per-point input features

    @property
    def in_width(self) -> int:
        return self.in_attrs + (3 if self.use_xyz else 0)

    def __post_init__(self):
        if len(self.decoder_widths) != len(self.sa):
            raise ValueError("PointArch needs one decoder level per set-abstraction level")
        if self.asfp and (len(self.asfp_radii) != len(self.sa) or len(self.asfp_widths) != len(self.sa)):
            raise ValueError("PointArch with asfp needs asfp_radii and asfp_widths per decoder level")

    @classmethod
    def from_dict(cls, d: dict) -> "PointArch":
        unknown = set(d) - POINT_ARCH_KEYS
        if unknown:
            raise ValueError(f"point arch: unknown keys {sorted(unknown)}")
        n_out = d.get("n_out", [256, 64])
        radii = d.get("radii", [[0.2, 0.4], [0.4, 0.8]])
        mlp = d.get("mlp", [[16, 32], [32, 64]])
        k_max = d.get("k_max", 16)
        if not (len(n_out) == len(radii) == len(mlp)):
            raise ValueError("point arch: n_out, radii and mlp need one entry per level")
        levels = len(n_out)
        sa = [SAConfig(n, list(r), k_max, list(w)) for n, r, w in zip(n_out, radii, mlp)]
        return cls(
            sa=sa,
            decoder_widths=[list(w) for w in d.get("decoder", [[64], [32]][:levels])],
            head=d.get("head", 32),
            in_attrs=d.get("in_attrs", 1),
            asfp=d.get("asfp", True),
            asfp_radii=list(d.get("asfp_radii", [r[-1] * 2 for r in radii][::-1])),
            asfp_k_max=d.get("asfp_k_max", k_max),
            asfp_widths=[list(w) for w in d.get("asfp_mlp", [[32]] * levels)],
            fps_seed=d.get("fps_seed", 0),
            use_xyz=d.get("use_xyz", False),
        )

    def to_dict(self) -> dict:
        return {
            "n_out": [s.n_out for s in self.sa],
            "radii": [list(s.radii) for s in self.sa],
            "k_max": self.sa[0].k_max,
            "mlp": [list(s.mlp_widths) for s in self.sa],
            "decoder": self.decoder_widths,
            "head": self.head,
            "in_attrs": self.in_attrs,
            "asfp": self.asfp,
            "asfp_radii": self.asfp_radii,
            "asfp_k_max": self.asfp_k_max,
            "asfp_mlp": self.asfp_widths,
            "fps_seed": self.fps_seed,
            "use_xyz": self.use_xyz,
        }


# --------------------------------------------------------------------------
# geometry
# --------------------------------------------------------------------------

def farthest_point_sample(xyz: np.ndarray, k: int, seed_index: int = 0) -> np.ndarray:
    return kernels.farthest_point_sample(xyz, k, seed_index)


def ball_query(centers: np.ndarray, xyz: np.ndarray, radius: float, k_max: int) -> np.ndarray:
    return kernels.ball_query(centers, xyz, radius, k_max)


def interpolation_weights(up_xyz: np.ndarray, down_xyz: np.ndarray, k: int = 3):
    """Neighbour indices and normalized inverse-square-distance weights.

    Uses ``min(k, M)`` neighbours. A query within ``1e-10`` of a down point
    copies that point (weight 1).
    """
    kk = min(k, down_xyz.shape[0])
    idx, d2 = kernels.knn(up_xyz, down_xyz, kk)
    close = d2 < COINCIDENT * COINCIDENT
    with np.errstate(divide="ignore"):
        w = 1.0 / d2
    hit = close.any(axis=1)
    w[hit] = 0.0
    first = np.argmax(close[hit], axis=1)
    w[np.flatnonzero(hit), first] = 1.0
    w /= w.sum(axis=1, keepdims=True)
    return idx, w


@dataclass
class Grouping:
    idx: np.ndarray  # [M, k]
    rel: np.ndarray  # [M, k, 3]


def _group(centers: np.ndarray, xyz: np.ndarray, radius: float, k_max: int) -> Grouping:
    idx = ball_query(centers, xyz, radius, k_max)
    return Grouping(idx, xyz[idx] - centers[:, None, :])


@dataclass
class CloudGeometry:
    xyz: list[np.ndarray]  # per level, level 0 = input
    sa_groups: list[list[Grouping]]  # per SA level, per radius
    interp: list[tuple[np.ndarray, np.ndarray]]  # per decoder level
    asfp_groups: list[Grouping | None]


def build_geometry(xyz: np.ndarray, arch: PointArch, fps_seed: int | None = None) -> CloudGeometry:
    xyz = np.ascontiguousarray(xyz, dtype=np.float64)
    if xyz.ndim != 2 or xyz.shape[1] != 3:
        raise ShapeError("build_geometry", xyz.shape, (None, 3))
    seed = arch.fps_seed if fps_seed is None else fps_seed
    levels = [xyz]
    groups = []
    for li, cfg in enumerate(arch.sa):
        cur = levels[-1]
        if cfg.n_out > cur.shape[0]:
            raise ValueError(f"SA level {li}: n_out {cfg.n_out} exceeds {cur.shape[0]} input points "
                             f"(cloud too small for this architecture)")
        sel = farthest_point_sample(cur, cfg.n_out, seed if li == 0 else 0)
        centers = cur[sel]
        groups.append([_group(centers, cur, r, cfg.k_max) for r in cfg.radii])
        levels.append(centers)
    interp = []
    asfp = []
    n_levels = len(arch.sa)
    for j in range(n_levels):
        up = levels[n_levels - 1 - j]
        down = levels[n_levels - j]
        interp.append(interpolation_weights(up, down))
        asfp.append(_group(up, down, arch.asfp_radii[j], arch.asfp_k_max) if arch.asfp else None)
    return CloudGeometry(levels, groups, interp, asfp)


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

def _add_mlp(store: ParamStore, prefix: str, widths: list[int], in_width: int, rng) -> None:
    w_in = in_width
    for k, w_out in enumerate(widths):
        store.add(f"{prefix}/l{k}/w", he_normal(rng, (w_in, w_out), w_in))
        store.add(f"{prefix}/l{k}/b", np.zeros(w_out))
        w_in = w_out


def init_point_params(arch: PointArch, rng: np.random.Generator, store: ParamStore | None = None,
                      prefix: str = "point") -> ParamStore:
    store = ParamStore() if store is None else store
    widths = [arch.in_width]
    for li, cfg in enumerate(arch.sa):
        for ri in range(len(cfg.radii)):
            _add_mlp(store, f"{prefix}/sa{li}/r{ri}", cfg.mlp_widths, 3 + widths[-1], rng)
        widths.append(cfg.out_width)
    n = len(arch.sa)
    cur = widths[-1]
    for j in range(n):
        skip = widths[n - 1 - j]
        fp_in = cur + skip
        if arch.asfp:
            _add_mlp(store, f"{prefix}/asfp{j}", arch.asfp_widths[j], 3 + cur, rng)
            fp_in += arch.asfp_widths[j][-1]
        _add_mlp(store, f"{prefix}/fp{j}", arch.decoder_widths[j], fp_in, rng)
        cur = arch.decoder_widths[j][-1]
    store.add(f"{prefix}/head/w", he_normal(rng, (cur, arch.head), cur))
    # nonzero so a point with all-dead inputs still has a usable direction
    store.add(f"{prefix}/head/b", HEAD_BIAS_STD * rng.standard_normal(arch.head))
    return store


def mlp(x: Tensor, store: ParamStore, prefix: str, n_layers: int, final_relu: bool = True) -> Tensor:
    """Shared per-point MLP over the last axis (linear + relu stacks)."""
    for k in range(n_layers):
        w = store[f"{prefix}/l{k}/w"]
        if x.shape[-1] != w.shape[0]:
            raise ShapeError(f"mlp {prefix}/l{k}", x.shape, w.shape)
        x = T.add(T.matmul(x, w), store[f"{prefix}/l{k}/b"])
        if final_relu or k < n_layers - 1:
            x = T.relu(x)
    return x


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

def _grouped_features(feats: Tensor | None, g: Grouping) -> Tensor:
    rel = Tensor(g.rel)
    if feats is None:
        return rel
    return T.concat([rel, T.take_rows(feats, g.idx)], axis=-1)


def grouped_mlp_pool(feats: Tensor | None, g: Grouping, store: ParamStore, prefix: str, n_layers: int) -> Tensor:
    """Group, shared MLP per neighbour, max-pool over the neighbourhood."""
    h = mlp(_grouped_features(feats, g), store, prefix, n_layers)
    return T.max_(h, axis=1)


def set_abstraction_level(feats: Tensor | None, groups: list[Grouping], cfg: SAConfig,
                          store: ParamStore, prefix: str) -> Tensor:
    outs = [
        grouped_mlp_pool(feats, g, store, f"{prefix}/r{ri}", len(cfg.mlp_widths))
        for ri, g in enumerate(groups)
    ]
    return outs[0] if len(outs) == 1 else T.concat(outs, axis=-1)


def interpolate(down_feats: Tensor, idx: np.ndarray, w: np.ndarray) -> Tensor:
    gathered = T.take_rows(down_feats, idx)  # [U, k, F]
    return T.sum_(T.mul(gathered, Tensor(w[:, :, None])), axis=1)


def _fp_block(parts: list[Tensor | None], store: ParamStore, prefix: str, n_layers: int) -> Tensor:
    parts = [p for p in parts if p is not None]
    x = parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)
    return mlp(x, store, prefix, n_layers)


def set_abstraction(xyz: np.ndarray, feats: Tensor | None, cfg: SAConfig, store: ParamStore,
                    prefix: str, seed_index: int = 0) -> tuple[np.ndarray, Tensor]:
    """Standalone SA layer: FPS, per-radius grouping + MLP + max-pool, concat radii."""
    sel = farthest_point_sample(xyz, cfg.n_out, seed_index)
    centers = xyz[sel]
    groups = [_group(centers, xyz, r, cfg.k_max) for r in cfg.radii]
    return centers, set_abstraction_level(feats, groups, cfg, store, prefix)


def feature_propagation(up_xyz: np.ndarray, down_xyz: np.ndarray, down_feats: Tensor,
                        skip_feats: Tensor | None, store: ParamStore, prefix: str, n_layers: int) -> Tensor:
    """3-NN inverse-square-distance interpolation, skip concat, MLP."""
    if down_xyz.shape[0] < 1:
        raise ValueError("feature_propagation needs at least one down point")
    idx, w = interpolation_weights(up_xyz, down_xyz)
    return _fp_block([interpolate(down_feats, idx, w), skip_feats], store, prefix, n_layers)


def asfp_layer(up_xyz: np.ndarray, down_xyz: np.ndarray, down_feats: Tensor, skip_feats: Tensor | None,
               radius: float, k_max: int, store: ParamStore, prefix: str, n_sa_layers: int,
               n_fp_layers: int, fp_prefix: str | None = None) -> Tensor:
    """Grouped-MLP features of the up points over the down cloud, concatenated
    with the interpolated features and the skip features, then the FP MLP."""
    idx, w = interpolation_weights(up_xyz, down_xyz)
    g = _group(up_xyz, down_xyz, radius, k_max)
    new = grouped_mlp_pool(down_feats, g, store, prefix, n_sa_layers)
    parts = [new, interpolate(down_feats, idx, w), skip_feats]
    return _fp_block(parts, store, fp_prefix or f"{prefix}_fp", n_fp_layers)


def point_net_forward(attrs: Tensor | np.ndarray | None, geom: CloudGeometry, store: ParamStore,
                      arch: PointArch, prefix: str = "point") -> Tensor:
    """Per-point features ``[P, head]`` (not normalized)."""
    p = geom.xyz[0].shape[0]
    if attrs is not None and not isinstance(attrs, Tensor):
        attrs = Tensor(attrs)
    if arch.in_attrs == 0:
        attrs = None
    elif attrs is None or attrs.shape != (p, arch.in_attrs):
        raise ShapeError("point_net_forward", (p, arch.in_attrs), None if attrs is None else attrs.shape)
    if arch.use_xyz:
        xyz = Tensor(geom.xyz[0])
        attrs = xyz if attrs is None else T.concat([attrs, xyz], axis=-1)
    feats: list[Tensor | None] = [attrs]
    for li, cfg in enumerate(arch.sa):
        feats.append(set_abstraction_level(feats[-1], geom.sa_groups[li], cfg, store, f"{prefix}/sa{li}"))
    n = len(arch.sa)
    cur = feats[-1]
    for j in range(n):
        idx, w = geom.interp[j]
        parts = []
        if arch.asfp:
            parts.append(grouped_mlp_pool(cur, geom.asfp_groups[j], store, f"{prefix}/asfp{j}",
                                          len(arch.asfp_widths[j])))
        parts.append(interpolate(cur, idx, w))
        parts.append(feats[n - 1 - j])
        cur = _fp_block(parts, store, f"{prefix}/fp{j}", len(arch.decoder_widths[j]))
    return T.add(T.matmul(cur, store[f"{prefix}/head/w"]), store[f"{prefix}/head/b"])
