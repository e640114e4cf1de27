"""Run configuration: JSON with full defaulting."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .data import CloudPolicy, ImagePolicy, SceneConfig
from .losses import CircleParams, TupleLayout
from .pointnet import PointArch
from .unet import ImageArch


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "data": {
        "seed": 1234,
        "dir": None,
        "scene": {},
        "n_train": 16,
        "n_val": 8,
        "image_aug": {},
        "cloud_aug": {},
    },
    "model": {
        "image": {"channels": [8, 16, 32, 64], "blocks": 1, "head": 32, "groups": 4},
        "point": {
            "n_out": [256, 64],
            "radii": [[0.5, 1.0], [1.0, 2.0]],
            "k_max": 16,
            "mlp": [[16, 32], [32, 64]],
            "decoder": [[64], [32]],
            "asfp": True,
            "asfp_radii": [2.4, 1.2],
            "asfp_mlp": [[32], [16]],
            "head": 32,
            "use_xyz": True,
        },
    },
    "loss": {"variant": "tuple_circle", "gamma": 32.0, "margin": 0.25, "d_shared": 16},
    "optim": {
        "lr": 0.01,
        "decay": 0.985,
        "epochs": 75,
        "steps_per_epoch": 16,
        "batch_n": 64,
        "weight_decay": 0.01,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
    },
    "eval": {
        "n_sample": 64,
        "every": 40,
        "k_clusters": 16,
        "bin_edges": [0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 10.0],
        "max_iters": 100,
    },
    "out": "runs/default",
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            # scene / augmentation / arch blocks are validated by their own constructors
            if path in ("data.scene", "data.image_aug", "data.cloud_aug", "model.point", "model.image"):
                out[k] = v
                continue
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, where)
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    raw: dict

    # ---- construction ----
    @classmethod
    def from_dict(cls, d: dict | None = None) -> "RunConfig":
        cfg = cls(_merge(DEFAULTS, d or {}))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}") from exc

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"

    def with_overrides(self, **kw) -> "RunConfig":
        raw = copy.deepcopy(self.raw)
        for dotted, v in kw.items():
            node = raw
            parts = dotted.split(".")
            for p in parts[:-1]:
                node = node[p]
            node[parts[-1]] = v
        return RunConfig.from_dict(raw)

    # ---- typed views ----
    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def scene(self) -> SceneConfig:
        return SceneConfig.from_dict(self.raw["data"]["scene"])

    @property
    def image_policy(self) -> ImagePolicy:
        d = dict(self.raw["data"]["image_aug"])
        for key in ("scale_range", "shift_range", "blur_sigma"):
            if key in d:
                d[key] = tuple(d[key])
        return ImagePolicy(**d)

    @property
    def cloud_policy(self) -> CloudPolicy:
        return CloudPolicy(**self.raw["data"]["cloud_aug"])

    @property
    def image_arch(self) -> ImageArch:
        return ImageArch.from_dict(self.raw["model"]["image"])

    @property
    def point_arch(self) -> PointArch:
        return PointArch.from_dict(self.raw["model"]["point"])

    @property
    def feature_dim(self) -> int:
        return int(self.raw["model"]["image"]["head"])

    @property
    def layout(self) -> TupleLayout:
        d_sh = int(self.raw["loss"]["d_shared"])
        return TupleLayout(d_sh, self.feature_dim - d_sh)

    @property
    def circle(self) -> CircleParams:
        return CircleParams(float(self.raw["loss"]["gamma"]), float(self.raw["loss"]["margin"]))

    @property
    def loss_variant(self) -> str:
        return self.raw["loss"]["variant"]

    @property
    def optim(self) -> dict:
        return self.raw["optim"]

    @property
    def eval(self) -> dict:
        return self.raw["eval"]

    @property
    def n_train(self) -> int:
        return int(self.raw["data"]["n_train"])

    @property
    def n_val(self) -> int:
        return int(self.raw["data"]["n_val"])

    def validate(self) -> None:
        try:
            self.scene, self.image_policy, self.cloud_policy
            ia, pa = self.image_arch, self.point_arch
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config block: {exc}") from exc
        if ia.head != pa.head:
            raise ConfigError(f"image head width {ia.head} != point head width {pa.head}")
        d_sh = int(self.raw["loss"]["d_shared"])
        if not 1 <= d_sh < ia.head:
            raise ConfigError(f"loss.d_shared={d_sh} must leave a private span in D={ia.head}")
        if self.loss_variant not in ("tuple_circle", "circle"):
            raise ConfigError(f"loss.variant must be tuple_circle or circle, got {self.loss_variant!r}")
        try:
            self.circle
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        sc = self.scene
        f = ia.downsample_factor
        if sc.height % f or sc.width % f:
            raise ConfigError(f"image size {sc.height}x{sc.width} not divisible by {f}")
        if self.eval["n_sample"] > self.optim["batch_n"]:
            raise ConfigError("eval.n_sample cannot exceed optim.batch_n")
        if self.eval["k_clusters"] < 1:
            raise ConfigError("eval.k_clusters must be >= 1")
