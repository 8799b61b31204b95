"""Command-line entry point wiring the whole pipeline.

Subcommands: synth, calibrate, features, train, render, eval. Exit codes:
0 success, 1 usage, 2 data error, 3 numerical failure. All failures print
one ERROR[<code>]: line to stderr. LRSGS_LOG in {error, info, debug} sets
verbosity.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import io, synth
from .config import (PipelineConfig, default_config, dump_config, load_config)
from .densify import MutationJournal
from .errors import DataError, DimensionMismatch, LrsgsError, NumericalError
from .features import classify_sweep
from .lidar import CalibratedSweep, CameraModel, calibrate_sweep
from .losses import LidarTargets
from .optim import FrameBatch, evaluate, train
from .scene import (ObjectNode, SceneGraph, init_from_features,
                    load_checkpoint, save_checkpoint)

log = logging.getLogger("lrsgs")

_CAL_DTYPE = np.dtype([
    ("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("reflectance", "<f4"),
    ("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4"), ("incidence_cos", "<f4"),
    ("ring", "<u2"), ("azimuth_index", "<u4")])


def _setup_logging():
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(
                 os.environ.get("LRSGS_LOG", "error").lower(), logging.ERROR)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _empty_calibrated():
    return CalibratedSweep(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)),
                           np.zeros(0), np.zeros(0, dtype=np.int64),
                           np.zeros(0, dtype=np.int64))


def build_training_inputs(ds: synth.Dataset, cfg: PipelineConfig):
    """Dataset -> (scene graph, frame batches, held-out mask).

    The scene is seeded from the first frame's labeled sweep plus the static
    seed points; points on the rigid object are excluded from the background
    and the object node is seeded from its own point file.
    """
    k = cfg.lidar_model.neighborhood_k
    calibrated = [calibrate_sweep(f.sweep, k)[0] for f in ds.frames]
    cal0 = calibrated[0]
    kinds, _, _ = classify_sweep(cal0, cfg.feature_extraction)

    objects = []
    if ds.obj is not None:
        inv = ds.obj.poses[0].inverse()
        loc = inv.apply(cal0.positions)
        inside = np.all(np.abs(loc) <= ds.obj.bbox + 0.05, axis=1)
        keep = np.flatnonzero(~inside)
        cal_bg = cal0.select(keep)
        kinds_bg = kinds[keep]
        obj_gauss = init_from_features(_empty_calibrated(),
                                       np.zeros(0, dtype=np.uint8),
                                       ds.obj.points, ds.obj.colors)
        objects.append(ObjectNode.from_transforms(obj_gauss, ds.obj.poses,
                                                  ds.obj.bbox))
    else:
        cal_bg, kinds_bg = cal0, kinds

    background = init_from_features(cal_bg, kinds_bg, ds.sfm_points,
                                    ds.sfm_colors)
    scene = SceneGraph(background, objects=objects,
                       frame_count=len(ds.frames))

    batches, held_out = [], []
    for f, frame in enumerate(ds.frames):
        targets = {}
        for ci, cam in enumerate(ds.cameras):
            img = frame.images[ci]
            if img.shape[:2] != (cam.height, cam.width):
                raise DimensionMismatch(
                    f"frame {f} camera {ci}: image {img.shape[1]}x{img.shape[0]}"
                    f" vs camera {cam.width}x{cam.height}")
            targets[ci] = LidarTargets.from_sweep(calibrated[f], cam)
            batches.append(FrameBatch(camera=cam, frame=f,
                                      gt_rgb=torch.tensor(img,
                                                          dtype=torch.float32),
                                      targets=targets[ci]))
            held_out.append(ds.held_out[ci])
    return scene, batches, held_out


def _dataset_config(scene: synth.SynthScene) -> PipelineConfig:
    cfg = default_config()
    fc = synth.standard_feature_config(scene.lidar)
    fc.edge_cap = 12
    fc.planar_cap = 8
    fc.reflectance_cap = 8
    cfg.feature_extraction = fc
    return cfg


def cmd_synth(args) -> int:
    scene = synth.standard_scene(seed=args.seed, frames=args.frames,
                                 image_size=args.image_size)
    synth.write_dataset(scene, args.out, seed=args.seed,
                        intensity_sigma=args.intensity_noise,
                        range_sigma=args.range_noise,
                        sfm_per_plane=args.sfm_per_plane)
    dump_config(_dataset_config(scene), Path(args.out) / "config.ini")
    log.info("dataset written to %s", args.out)
    print(f"wrote {args.frames} frames, {len(scene.cameras)} cameras to "
          f"{args.out}")
    return 0


def _load_frame_sweep(args):
    ds = synth.load_dataset(args.data)
    if not 0 <= args.frame < len(ds.frames):
        raise DataError(f"frame {args.frame} outside dataset "
                        f"(has {len(ds.frames)})")
    return ds.frames[args.frame].sweep


def cmd_calibrate(args) -> int:
    sweep = _load_frame_sweep(args)
    cal, diag = calibrate_sweep(sweep, args.neighborhood_k)
    out = np.empty(len(cal.positions), dtype=_CAL_DTYPE)
    out["x"], out["y"], out["z"] = cal.positions.T.astype(np.float32)
    out["reflectance"] = cal.reflectance
    out["nx"], out["ny"], out["nz"] = cal.normals.T.astype(np.float32)
    out["incidence_cos"] = cal.incidence_cos
    out["ring"] = cal.ring
    out["azimuth_index"] = cal.azimuth_index
    io.write_ply(args.out, out)
    print(f"calibrated {diag.calibrated_points}/{diag.total_points} points "
          f"(degenerate {diag.dropped_degenerate}, isolated "
          f"{diag.dropped_isolated}), normalizer {diag.normalizer:.6g}")
    return 0


def cmd_features(args) -> int:
    sweep = _load_frame_sweep(args)
    cfg = load_config(args.config).feature_extraction if args.config \
        else default_config().feature_extraction
    cal, _ = calibrate_sweep(sweep)
    kinds, smo, grad = classify_sweep(cal, cfg)
    rows = sweep.to_structured()
    out = np.zeros(len(rows), dtype=io.LABELED_DTYPE)
    for name in rows.dtype.names:
        out[name] = rows[name]
    # map calibrated rows back to raw rows by (ring, azimuth index)
    raw_key = {(int(r), int(a)): i
               for i, (r, a) in enumerate(zip(sweep.ring, sweep.azimuth_index))}
    out["smoothness"] = np.nan
    out["refl_grad"] = np.nan
    for j, (r, a) in enumerate(zip(cal.ring, cal.azimuth_index)):
        i = raw_key[(int(r), int(a))]
        out["label"][i] = kinds[j]
        out["smoothness"][i] = smo[j]
        out["refl_grad"][i] = grad[j]
    io.write_ply(args.out, out)
    counts = {int(v): int(c) for v, c in zip(*np.unique(kinds,
                                                        return_counts=True))}
    print(f"labels {counts} -> {args.out}")
    return 0


def _resolve_train_config(args) -> PipelineConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        bundled = Path(args.data) / "config.ini"
        cfg = load_config(bundled) if bundled.exists() else default_config()
    import dataclasses
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.iters is not None:
        overrides["iterations"] = args.iters
        # a shortened run must pull the densify window in with it
        start, end = cfg.train.window()
        if start >= args.iters:
            overrides["densify_start"] = 0
            overrides["densify_end"] = 0
        elif end > args.iters:
            overrides["densify_end"] = args.iters
    if overrides:
        try:
            cfg.train = dataclasses.replace(cfg.train, **overrides)
        except ValueError as err:
            raise DataError(str(err)) from err
    return cfg


def cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    ds = synth.load_dataset(args.data)
    scene, batches, held_out = build_training_inputs(ds, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.ini")
    journal = MutationJournal(out / "journal.jsonl")
    log.info("training %d iterations on %d frames (%d gaussians)",
             cfg.train.iterations, len(batches), len(scene.background))

    scene, history = train(scene, batches, config=cfg.train,
                           weights=cfg.losses, dconfig=cfg.densify,
                           out_dir=str(out), journal=journal,
                           held_out=held_out)
    save_checkpoint(scene, out / "checkpoint_final.lrsg")

    loss_keys = ["iter", "count", "rgb", "depth", "fle", "fle_grad",
                 "direction", "value", "total", "error"]
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=loss_keys, extrasaction="ignore")
        w.writeheader()
        w.writerows(history["loss"])
    with open(out / "eval.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["iter", "psnr", "ssim",
                                           "refl_rmse"], extrasaction="ignore")
        w.writeheader()
        w.writerows(history["eval"])
    if history["eval"]:
        last = history["eval"][-1]
        print("final " + " ".join(f"{k}={last[k]:.4f}" for k in
                                  ("psnr", "ssim", "refl_rmse") if k in last))
    else:
        print(f"trained {cfg.train.iterations} iterations")
    return 0


def cmd_render(args) -> int:
    from .raster import render
    from .scene import world_gaussians
    scene = load_checkpoint(args.checkpoint)
    camera = CameraModel.load(args.camera)
    with torch.no_grad():
        frame = render(world_gaussians(scene, args.frame), camera, scene.sky)
    io.write_image_png(args.out, frame.color.numpy())
    if args.depth:
        io.write_pfm(args.depth, frame.depth.numpy())
    if args.reflectance:
        io.write_pfm(args.reflectance, frame.reflectance.numpy())
    print(f"rendered frame {args.frame} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = default_config()
    ds = synth.load_dataset(args.data)
    scene = load_checkpoint(args.checkpoint)
    if scene.frame_count != len(ds.frames):
        raise DimensionMismatch(
            f"checkpoint has {scene.frame_count} frames, dataset "
            f"{len(ds.frames)}")
    _, batches, held_out = build_training_inputs(ds, cfg)
    pick = [b for b, h in zip(batches, held_out) if h or args.all]
    metrics = evaluate(scene, pick)
    print(" ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lrsgs", description=__doc__)
    p.add_argument("--threads", type=int, default=None,
                   help="cap torch CPU threads (default: hardware)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--intensity-noise", type=float, default=0.0)
    s.add_argument("--range-noise", type=float, default=0.0)
    s.add_argument("--sfm-per-plane", type=int, default=120)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("calibrate", help="intensity -> reflectance for one sweep")
    s.add_argument("--data", required=True)
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--neighborhood-k", type=int, default=2)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("features", help="label a sweep's salient points")
    s.add_argument("--data", required=True)
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train", help="optimize a scene against a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None,
                   help="INI config (default: <data>/config.ini if present)")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--iters", type=int, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render one frame from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--camera", required=True, help="camera INI file")
    s.add_argument("--frame", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--depth", default=None, help="also write depth PFM here")
    s.add_argument("--reflectance", default=None,
                   help="also write reflectance PFM here")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="held-out metrics for a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--all", action="store_true",
                   help="evaluate every view, not only held-out ones")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 0 if err.code in (0, None) else 1
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except NumericalError as err:
        print(f"ERROR[3]: {err}", file=sys.stderr)
        return 3
    except (DataError, io.PlyError, OSError, ValueError) as err:
        print(f"ERROR[2]: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
