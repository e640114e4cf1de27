"""Joint training of both encoders and periodic validation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig
from .data import (AugmentedPair, InsufficientCorrespondences, SceneSample, augment_pair,
                   generate_scene, load_pair_dir, read_manifest)
from .evaluation import METRICS, MatchReport, acc_suite, mean_reports, write_curve
from .losses import batch_loss
from .model import DualEncoder, make_batch
from .optim import AdamWState, adamw_step, decayed_lr, save_checkpoint
from .tensor import no_grad

log = logging.getLogger(__name__)

VAL_SEED_OFFSET = 1_000_000


class NumericalError(RuntimeError):
    pass


def scene_seeds(cfg: RunConfig, split: str) -> list[int]:
    base = int(cfg.raw["data"]["seed"]) * 10_000
    if split == "val":
        return [base + VAL_SEED_OFFSET + i for i in range(cfg.n_val)]
    return [base + i for i in range(cfg.n_train)]


def build_scenes(seeds: list[int], cfg: RunConfig) -> list[SceneSample]:
    """Generate one scene per seed, skipping forward past seeds with too few matches."""
    scenes = []
    for s in seeds:
        for attempt in range(100):
            try:
                scenes.append(generate_scene(s + attempt * 7919, cfg.scene, scene_id=s))
                break
            except InsufficientCorrespondences:
                continue
        else:
            raise InsufficientCorrespondences(f"no usable scene near seed {s}")
    return scenes


def dataset_scenes(cfg: RunConfig) -> tuple[list[SceneSample], list[SceneSample]]:
    """Train and validation scenes: read from ``data.dir`` when set, else generated."""
    root = cfg.raw["data"]["dir"]
    if root is None:
        return (build_scenes(scene_seeds(cfg, "train"), cfg), build_scenes(scene_seeds(cfg, "val"), cfg))
    entries = read_manifest(root)
    split = {"train": [], "val": []}
    for e in entries:
        split[e.get("split", "train")].append(load_pair_dir(Path(root) / f"scene_{e['id']}", e.get("seed")))
    if not split["train"] or not split["val"]:
        raise InsufficientCorrespondences(f"{root}: dataset needs both train and val scenes")
    return split["train"], split["val"]


def validation_pairs(scenes: list[SceneSample], cfg: RunConfig) -> list[AugmentedPair]:
    return [augment_pair(sc, VAL_SEED_OFFSET + i, cfg.image_policy, cfg.cloud_policy)
            for i, sc in enumerate(scenes)]


@dataclass
class EvalResult:
    accs: dict[str, float]
    loss: float
    reports: list[MatchReport]
    batches: list = field(default_factory=list)


def evaluate(encoder: DualEncoder, pairs: list[AugmentedPair], cfg: RunConfig, keep_batches: bool = False) -> EvalResult:
    reports, losses, kept = [], [], []
    n = int(cfg.optim["batch_n"])
    with no_grad():
        for i, pair in enumerate(pairs):
            batch, rows = make_batch(pair, n, VAL_SEED_OFFSET + i, encoder)
            reports.append(acc_suite(batch, cfg.layout, int(cfg.eval["n_sample"]), seed=i))
            losses.append(batch_loss(batch, cfg.loss_variant, cfg.layout, cfg.circle).item())
            if keep_batches:
                kept.append((batch, rows))
    return EvalResult(mean_reports(reports), float(np.mean(losses)), reports, kept)


@dataclass
class TrainResult:
    encoder: DualEncoder
    curve: list[dict]
    best_acc_s: float
    steps: int


def _grad_norms(encoder: DualEncoder) -> dict[str, float]:
    out = {}
    for prefix in ("image", "point"):
        sq = sum(float((t.grad ** 2).sum()) for p, t in encoder.params.items()
                 if p.startswith(prefix) and t.grad is not None)
        out[prefix] = math.sqrt(sq)
    return out


def train(cfg: RunConfig, out_dir: str | Path | None = None,
          callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Train for ``epochs * steps_per_epoch`` steps; lr decays once per epoch."""
    opt = cfg.optim
    steps_per_epoch = int(opt["steps_per_epoch"])
    total = int(opt["epochs"]) * steps_per_epoch
    every = max(1, int(cfg.eval["every"]))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")

    train_scenes, val_scenes = dataset_scenes(cfg)
    val_pairs = validation_pairs(val_scenes, cfg)
    encoder = DualEncoder(cfg.image_arch, cfg.point_arch, seed=cfg.seed)
    state = AdamWState(lr=float(opt["lr"]), beta1=float(opt["beta1"]), beta2=float(opt["beta2"]),
                       eps=float(opt["eps"]), weight_decay=float(opt["weight_decay"]))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    n = int(opt["batch_n"])

    curve: list[dict] = []
    best = -1.0

    def record(step: int) -> None:
        nonlocal best
        ev = evaluate(encoder, val_pairs, cfg)
        row = {"step": step, **ev.accs, "loss": ev.loss}
        curve.append(row)
        log.info("step %d  %s  loss %.4f", step, "  ".join(f"{m} {ev.accs[m]:.3f}" for m in METRICS), ev.loss)
        if callback is not None:
            callback(row)
        if out is not None:
            write_curve(out / "acc_curve.csv", curve)
            if ev.accs["acc_s"] > best:
                save_checkpoint(encoder.params, out / "best.ckpt")
        best = max(best, ev.accs["acc_s"])

    record(0)
    last_norms: dict[str, float] = {}
    for step in range(1, total + 1):
        epoch = (step - 1) // steps_per_epoch
        state.lr = decayed_lr(float(opt["lr"]), float(opt["decay"]), epoch)
        scene = train_scenes[int(rng.integers(len(train_scenes)))]
        for _ in range(10):
            pair = augment_pair(scene, int(rng.integers(2**31)), cfg.image_policy, cfg.cloud_policy)
            if len(pair.surviving) >= n:
                break
        batch, _ = make_batch(pair, n, int(rng.integers(2**31)), encoder)
        loss = batch_loss(batch, cfg.loss_variant, cfg.layout, cfg.circle)
        if not np.isfinite(loss.item()):
            raise NumericalError(
                f"non-finite loss at step {step} (lr {state.lr:.3g}, previous grad norms {last_norms})")
        loss.backward()
        last_norms = _grad_norms(encoder)
        if not all(np.isfinite(v) for v in last_norms.values()):
            raise NumericalError(f"non-finite gradient at step {step} (lr {state.lr:.3g}, grad norms {last_norms})")
        adamw_step(encoder.params, state)
        if step % every == 0 or step == total:
            record(step)

    if out is not None:
        save_checkpoint(encoder.params, out / "final.ckpt")
        if total == 0 or not (out / "best.ckpt").exists():
            save_checkpoint(encoder.params, out / "best.ckpt")
    return TrainResult(encoder, curve, best, total)
