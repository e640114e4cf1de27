"""Command-line entry point: ``xmcl {gen-data,train,eval,visualize,gradcheck}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .cluster import export_label_map, grid_pixels, positional_kmeans, spherical_kmeans
from .config import ConfigError, RunConfig
from .data import (InsufficientCorrespondences, PairFormatError, save_pair_dir, scene_config_dict,
                   write_manifest)
from .evaluation import METRICS, merge_histograms, mismatch_pixel_histogram
from .gradsuite import run_suite
from .model import DualEncoder
from .optim import CheckpointError, load_checkpoint
from .tensor import no_grad
from .train import NumericalError, dataset_scenes, evaluate, train, validation_pairs

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

log = logging.getLogger("xmcl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for numerical failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xmcl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", type=Path, help="JSON run config (defaults fill missing keys)")
        sp.add_argument("--out", type=Path, help="output directory (overrides config 'out')")
        sp.add_argument("--seed", type=int, help="overrides config 'seed'")
        sp.add_argument("--loss", choices=["tuple_circle", "circle"], help="overrides loss.variant")
        if checkpoint:
            sp.add_argument("--checkpoint", type=Path, required=True)

    common(sub.add_parser("gen-data", help="write train/val scenes as pair directories"))
    common(sub.add_parser("train", help="train both encoders jointly"))
    ev = sub.add_parser("eval", help="accuracies and mismatch histogram on validation scenes")
    common(ev, checkpoint=True)
    vis = sub.add_parser("visualize", help="cluster label maps for one validation scene")
    common(vis, checkpoint=True)
    vis.add_argument("--scene", type=int, default=0, help="validation scene index")
    gc = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    common(gc)
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.loss is not None:
        over["loss.variant"] = args.loss
    if args.out is not None:
        over["out"] = str(args.out)
    return cfg.with_overrides(**over) if over else cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.raw["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc.strerror}") from exc
    return out


def _load_encoder(cfg: RunConfig, checkpoint: Path) -> DualEncoder:
    enc = DualEncoder(cfg.image_arch, cfg.point_arch, seed=cfg.seed)
    load_checkpoint(enc.params, checkpoint)
    return enc


def cmd_gen_data(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    train_scenes, val_scenes = dataset_scenes(cfg.with_overrides(**{"data.dir": None}))
    entries = []
    for split, scenes in (("train", train_scenes), ("val", val_scenes)):
        for sc in scenes:
            save_pair_dir(sc, out)
            entries.append({"id": sc.scene_id, "seed": sc.rng_seed, "split": split})
    write_manifest(out, entries, scene_config_dict(cfg.scene))
    print(f"wrote {len(entries)} scenes to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    res = train(cfg, out)
    last = res.curve[-1]
    print(f"trained {res.steps} steps; final " + " ".join(f"{m}={last[m]:.4f}" for m in METRICS)
          + f"; best acc_s={res.best_acc_s:.4f}; outputs in {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: Path) -> int:
    out = _out_dir(cfg)
    enc = _load_encoder(cfg, checkpoint)
    _, val_scenes = dataset_scenes(cfg)
    pairs = validation_pairs(val_scenes, cfg)
    ev = evaluate(enc, pairs, cfg, keep_batches=True)
    with open(out / "eval_acc.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", *METRICS, "n_sampled"])
        for pair, rep in zip(pairs, ev.reports):
            w.writerow([pair.sample.scene_id, *(repr(getattr(rep, m)) for m in METRICS), rep.n_sampled])
        w.writerow(["mean", *(repr(ev.accs[m]) for m in METRICS), ""])
    hists = []
    for pair, rep, (_, rows) in zip(pairs, ev.reports, ev.batches):
        hists.append(mismatch_pixel_histogram(rep, rows[:, :3], pair.sample.xyz, pair.sample.camera,
                                              cfg.eval["bin_edges"]))
    merge_histograms(hists).to_csv(out / "mismatch_hist.csv")
    print(" ".join(f"{m}={ev.accs[m]:.4f}" for m in METRICS) + f"  loss={ev.loss:.4f}")
    return EXIT_OK


def cmd_visualize(cfg: RunConfig, checkpoint: Path, scene_index: int) -> int:
    out = _out_dir(cfg)
    enc = _load_encoder(cfg, checkpoint)
    _, val_scenes = dataset_scenes(cfg)
    if not 0 <= scene_index < len(val_scenes):
        raise ConfigError(f"--scene {scene_index} outside 0..{len(val_scenes) - 1}")
    sc = val_scenes[scene_index]
    k, iters, seed = int(cfg.eval["k_clusters"]), int(cfg.eval["max_iters"]), cfg.seed
    h, w = sc.image.shape[-2:]
    with no_grad():
        fmap = enc.image_features(sc.image[None]).data[0]
        pfeat = enc.point_features(sc.xyz, sc.attrs).data
    img_rows = fmap.reshape(fmap.shape[0], -1).T
    d_sh = cfg.layout.d_sh

    img_full = spherical_kmeans(img_rows, k, iters, seed)
    export_label_map(img_full.assignments, (h, w), out / "image_full.ppm", seed, k)
    pt_full = spherical_kmeans(pfeat, k, iters, seed)
    export_label_map(pt_full.assignments, sc.xyz, out / "points_full.txt", seed, k)
    # one centroid set for both modalities, so labels share one space
    joint = spherical_kmeans(np.concatenate([img_rows[:, :d_sh], pfeat[:, :d_sh]]), k, iters, seed)
    n_pix = img_rows.shape[0]
    export_label_map(joint.assignments[:n_pix], (h, w), out / "shared_joint_image.ppm", seed, k)
    export_label_map(joint.assignments[n_pix:], sc.xyz, out / "shared_joint_points.txt", seed, k)
    pos = positional_kmeans(grid_pixels(h, w), k, seed, iters)
    export_label_map(pos.assignments, (h, w), out / "positional.ppm", seed, k)
    print(f"wrote label maps for scene {sc.scene_id} to {out}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    rep = run_suite(seed=cfg.seed)
    for line in rep.lines():
        print(line)
    print(f"{len(rep.results)} checks, {len(rep.failures)} failed, {rep.seconds:.1f} s")
    return EXIT_OK if rep.passed else EXIT_NUMERIC


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "visualize":
            return cmd_visualize(cfg, args.checkpoint, args.scene)
        return cmd_gradcheck(cfg)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, PairFormatError, InsufficientCorrespondences) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: no such file", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
