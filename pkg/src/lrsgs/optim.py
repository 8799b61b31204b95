"""Joint optimization: one adaptive-moment loop over every Gaussian
attribute, object poses, and the sky, with densification bookkeeping and
a finite-difference gradient checker.

The optimizer is rebuilt whenever density control changes row counts;
moment state follows surviving rows, children start cold, and rows whose
parameterization changed in a transform have their moments reset.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
import torch

from .densify import (
    DensifyConfig,
    GradientAccumulator,
    MutationJournal,
    densify_and_prune,
    salient_transform,
    shape_stats,
)
from .errors import DimensionMismatch, EmptyInput, NonFiniteLoss
from .lidar import CameraModel
from .losses import LidarTargets, LossReport, LossWeights, metrics, total_loss
from .raster import RasterSettings, render
from .scene import SceneGraph, save_checkpoint, world_gaussians

ADAM_EPS = 1e-15

# optimizer group name -> GaussianCollection attribute
GROUP_ATTRS = (
    ("mean", "means"),
    ("rotation", "quaternions"),
    ("scales", "log_scales"),
    ("opacity", "opacity_logits"),
    ("reflectance", "reflectance_logits"),
    ("sh", "sh"),
)


@dataclass
class TrainConfig:
    iterations: int = 7000
    seed: int = 0
    lr_mean: float = 1.6e-4
    lr_mean_final: float = 1.6e-6  # exponential decay target at `iterations`
    lr_rotation: float = 1e-3
    lr_scales: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_reflectance: float = 5e-3
    lr_sky: float = 1e-2
    lr_object_pose: float = 1e-4
    densify_start: int = 500
    densify_end: int | None = None  # default: iterations // 2
    checkpoint_interval: int = 1000
    eval_interval: int = 500

    def __post_init__(self):
        for f in ("lr_mean", "lr_mean_final", "lr_rotation", "lr_scales",
                  "lr_opacity", "lr_sh", "lr_reflectance", "lr_sky",
                  "lr_object_pose"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        start, end = self.window()
        if not 0 <= start <= end <= self.iterations:
            raise ValueError("densify window must lie within [0, iterations]")

    def window(self):
        end = self.densify_end
        if end is None:
            end = self.iterations // 2
        return self.densify_start, end


@dataclass
class FrameBatch:
    """One supervised view: camera, pose-track index, GT color, LiDAR targets."""

    camera: CameraModel
    frame: int
    gt_rgb: torch.Tensor
    targets: LidarTargets | None = None


def _collections(scene: SceneGraph):
    out = [("background", scene.background)]
    for i, obj in enumerate(scene.objects):
        out.append((f"object{i}", obj.gaussians))
    return out


def _total_rows(scene: SceneGraph) -> int:
    return sum(len(c) for _, c in _collections(scene))


def build_optimizer(scene: SceneGraph, config: TrainConfig) -> torch.optim.Adam:
    colls = [c for _, c in _collections(scene)]
    groups = []
    for name, attr in GROUP_ATTRS:
        groups.append({"params": [getattr(c, attr) for c in colls],
                       "lr": getattr(config, f"lr_{name}"), "name": name})
    groups.append({"params": [scene.sky.env_map], "lr": config.lr_sky,
                   "name": "sky"})
    pose_params = [t for o in scene.objects for t in (o.pose_quats, o.pose_trans)]
    if pose_params:
        groups.append({"params": pose_params, "lr": config.lr_object_pose,
                       "name": "object_pose"})
    return torch.optim.Adam(groups, eps=ADAM_EPS)


def _mean_lr(config: TrainConfig, iteration: int) -> float:
    t = min(max(iteration / max(config.iterations, 1), 0.0), 1.0)
    return config.lr_mean * (config.lr_mean_final / config.lr_mean) ** t


def _check_finite(report: LossReport):
    for term in ("rgb", "depth", "fle", "fle_grad", "direction", "value",
                 "total"):
        v = float(getattr(report, term).detach())
        if not math.isfinite(v):
            raise NonFiniteLoss(term, v)


def _renormalize_quaternions(scene: SceneGraph):
    with torch.no_grad():
        for _, coll in _collections(scene):
            if len(coll):
                coll.quaternions /= coll.quaternions.norm(
                    dim=-1, keepdim=True).clamp_min(1e-12)
        for obj in scene.objects:
            obj.pose_quats /= obj.pose_quats.norm(
                dim=-1, keepdim=True).clamp_min(1e-12)


def train_step(scene: SceneGraph, batch: FrameBatch, weights: LossWeights,
               optimizer: torch.optim.Adam,
               acc: GradientAccumulator | None = None,
               settings: RasterSettings | None = None) -> LossReport:
    """Render one frame, step every parameter group, renormalize rotations."""
    wg = world_gaussians(scene, batch.frame)
    frame = render(wg, batch.camera, scene.sky, settings)
    report = total_loss(frame, batch.gt_rgb, batch.targets, batch.camera,
                        weights)
    _check_finite(report)  # leaves parameters untouched on failure
    optimizer.zero_grad(set_to_none=True)
    report.total.backward()
    if acc is not None:
        acc.add_view(frame.aux)
        offset = 0
        for _, coll in _collections(scene):
            acc.add_means_grad(offset, coll.means.grad)
            offset += len(coll)
    norms = {}
    for g in optimizer.param_groups:
        sq = 0.0
        for p in g["params"]:
            if p.grad is not None:
                sq += float((p.grad.detach() ** 2).sum())
        norms[g["name"]] = math.sqrt(sq)
    report.grad_norms = norms
    optimizer.step()
    _renormalize_quaternions(scene)
    for term in ("rgb", "depth", "fle", "fle_grad", "direction", "value",
                 "total"):
        setattr(report, term, getattr(report, term).detach())
    return report


def evaluate(scene: SceneGraph, batches, settings=None) -> dict:
    """Mean image metrics over the given frames, no gradient flow."""
    rows = []
    with torch.no_grad():
        for b in batches:
            frame = render(world_gaussians(scene, b.frame), b.camera,
                           scene.sky, settings)
            refl_gt = b.targets.reflectance if b.targets is not None else None
            rows.append(metrics(frame.color, b.gt_rgb, frame.reflectance,
                                refl_gt))
    out = {}
    for key in ("psnr", "ssim", "refl_rmse"):
        vals = [r[key] for r in rows if key in r]
        if vals:
            out[key] = float(np.mean(vals))
    return out


def _density_step(scene, optimizer, acc, dconfig, config, rng, image_width,
                  iteration, journal):
    """Transform, then split/clone/prune, then migrate optimizer state."""
    before = _collections(scene)
    offset = 0
    changed = []
    for name, coll in before:
        n = len(coll)
        stats = shape_stats(coll)
        tev = salient_transform(coll, stats, dconfig)
        if tev:
            rows = [e["parent_id"] for e in tev]
            for p in (coll.quaternions, coll.log_scales):
                st = optimizer.state.get(p)
                if st:  # reparameterized rows restart their moments
                    st["exp_avg"][rows] = 0.0
                    st["exp_avg_sq"][rows] = 0.0
        g2, g3, rad = acc.slices(offset, n)
        res = densify_and_prune(coll, g2, g3, rad, dconfig,
                                image_width=image_width, rng=rng)
        changed.append((name, coll, res.collection, res.kept))
        if res.collection is not coll:
            if name == "background":
                scene.background = res.collection
            else:
                scene.objects[int(name[len("object"):])].gaussians = res.collection
        if journal is not None and (tev or res.events):
            journal.log(iteration, tev + res.events, node=name)
        offset += n
    if all(old is new for _, old, new, _ in changed):
        return optimizer
    new_opt = build_optimizer(scene, config)
    old_state = optimizer.state
    for _, old_c, new_c, kept in changed:
        for _, attr in GROUP_ATTRS:
            op, np_ = getattr(old_c, attr), getattr(new_c, attr)
            st = old_state.get(op)
            if not st:
                continue
            if op is np_:
                new_opt.state[np_] = st
                continue
            n_keep = int(kept.sum())
            nst = {"step": st["step"].clone()}
            sel = torch.from_numpy(kept)
            for key in ("exp_avg", "exp_avg_sq"):
                buf = torch.zeros_like(np_)
                buf[:n_keep] = st[key][sel]
                nst[key] = buf
            new_opt.state[np_] = nst
    passthrough = [scene.sky.env_map]
    for o in scene.objects:
        passthrough += [o.pose_quats, o.pose_trans]
    for p in passthrough:
        st = old_state.get(p)
        if st:
            new_opt.state[p] = st
    return new_opt


def train(scene: SceneGraph, batches, config: TrainConfig | None = None,
          weights: LossWeights | None = None,
          dconfig: DensifyConfig | None = None,
          out_dir=None, journal: MutationJournal | None = None,
          settings: RasterSettings | None = None, progress=None,
          held_out=None):
    """Optimize the scene against the given frames.

    Every fourth frame is held out for evaluation unless an explicit held_out
    mask (True = evaluation-only) is given. Returns the scene and a history
    dict with per-iteration loss rows and periodic held-out metrics.
    """
    config = config or TrainConfig()
    weights = weights or LossWeights()
    dconfig = dconfig or DensifyConfig()
    if not batches:
        raise EmptyInput("no frames to train on")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    split_rng = np.random.default_rng(config.seed + 1)
    if held_out is None:
        held_out = [i % 4 == 3 for i in range(len(batches))]
    if len(held_out) != len(batches):
        raise DimensionMismatch(
            f"held_out mask: {len(held_out)} entries for {len(batches)} frames")
    train_idx = [i for i, h in enumerate(held_out) if not h]
    eval_idx = [i for i, h in enumerate(held_out) if h]
    if not train_idx:
        train_idx = list(range(len(batches)))
    image_width = batches[0].camera.width
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    optimizer = build_optimizer(scene, config)
    acc = GradientAccumulator(_total_rows(scene))
    start, end = config.window()
    history = {"loss": [], "eval": []}
    order = []
    failures = 0
    for it in range(1, config.iterations + 1):
        if not order:
            order = list(rng.permutation(len(train_idx)))
        batch = batches[train_idx[order.pop()]]
        for g in optimizer.param_groups:
            if g.get("name") == "mean":
                g["lr"] = _mean_lr(config, it)
        try:
            report = train_step(scene, batch, weights, optimizer, acc, settings)
        except NonFiniteLoss as err:
            failures += 1
            history["loss"].append({"iter": it, "error": err.term})
            if failures >= 3:
                raise
            continue
        failures = 0
        row = {"iter": it, "count": _total_rows(scene), **report.to_dict()}
        history["loss"].append(row)
        if start <= it <= end and it % dconfig.interval == 0:
            optimizer = _density_step(scene, optimizer, acc, dconfig, config,
                                      split_rng, image_width, it, journal)
            acc = GradientAccumulator(_total_rows(scene))
        if out_dir and it % config.checkpoint_interval == 0:
            save_checkpoint(scene,
                            os.path.join(out_dir, f"checkpoint_{it:06d}.lrsg"))
        if eval_idx and it % config.eval_interval == 0:
            history["eval"].append(
                {"iter": it,
                 **evaluate(scene, [batches[i] for i in eval_idx], settings)})
        if progress is not None:
            progress(it, history)
    return scene, history


def check_gradients(scene: SceneGraph, batch: FrameBatch,
                    weights: LossWeights | None = None, step: float = 1e-4,
                    samples_per_group: int = 60, seed: int = 0) -> dict:
    """Central finite differences against autograd for every parameter group.

    Requires a small double-precision scene (<= 50 Gaussians, image <= 32x32)
    and renders in precise mode so the loss surface has no cutoff jumps.
    Returns the max relative error per group over sampled coordinates where
    either derivative is above 1e-6.
    """
    weights = weights or LossWeights()
    if _total_rows(scene) > 50:
        raise ValueError("gradient check limited to 50 Gaussians")
    if batch.camera.width > 32 or batch.camera.height > 32:
        raise ValueError("gradient check limited to 32x32 images")
    if scene.background.dtype != torch.float64 \
            or scene.sky.env_map.dtype != torch.float64:
        raise ValueError("gradient check requires a float64 scene")
    settings = RasterSettings(precise=True)

    def value() -> float:
        with torch.no_grad():
            frame = render(world_gaussians(scene, batch.frame), batch.camera,
                           scene.sky, settings)
            rep = total_loss(frame, batch.gt_rgb, batch.targets, batch.camera,
                             weights)
            return float(rep.total)

    groups = []
    colls = [c for _, c in _collections(scene)]
    for name, attr in GROUP_ATTRS:
        groups.append((name, [getattr(c, attr) for c in colls if len(c)]))
    groups.append(("sky", [scene.sky.env_map]))
    if scene.objects:
        groups.append(("object_pose",
                       [t for o in scene.objects
                        for t in (o.pose_quats, o.pose_trans)]))

    for _, params in groups:
        for p in params:
            p.grad = None
    frame = render(world_gaussians(scene, batch.frame), batch.camera,
                   scene.sky, settings)
    rep = total_loss(frame, batch.gt_rgb, batch.targets, batch.camera, weights)
    rep.total.backward()

    rng = np.random.default_rng(seed)
    report = {}
    for name, params in groups:
        sizes = np.array([p.numel() for p in params])
        total = int(sizes.sum())
        if total == 0:
            continue
        cum = np.cumsum(sizes)
        take = rng.choice(total, size=min(samples_per_group, total),
                          replace=False)
        worst = 0.0
        for flat in np.sort(take):
            t = int(np.searchsorted(cum, flat, side="right"))
            j = int(flat - (cum[t - 1] if t else 0))
            p = params[t]
            view = p.data.reshape(-1)
            orig = float(view[j])
            view[j] = orig + step
            plus = value()
            view[j] = orig - step
            minus = value()
            view[j] = orig
            fd = (plus - minus) / (2.0 * step)
            an = float(p.grad.reshape(-1)[j]) if p.grad is not None else 0.0
            scale = max(abs(an), abs(fd))
            if scale > 1e-6:
                worst = max(worst, abs(an - fd) / scale)
        report[name] = worst
    return report
