"""Density control: salience-specialized split/clone/prune plus the
upgrade/downgrade transform with two-evaluation hysteresis.

Shape statistics come from the materialized scale diagonal, so a salient
primitive's inert storage column never influences its own fate. Upgrades
keep the covariance eigenframe by permuting rotation columns instead of
re-running an eigensolver; downgrades write the materialized diagonal
back into three free scale columns, preserving the shape exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import matrix_to_quat_np, quat_to_matrix_np
from .scene import GaussianCollection, GaussianKind

TAU_MAX = 0.5
TAU_MIN = 0.1


@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4       # mean view-space positional gradient
    split_scale_threshold: float = 0.05  # meters; larger gets split, smaller cloned
    split_factor: float = 1.6
    prune_opacity: float = 0.005
    tau_max: float = TAU_MAX
    tau_min: float = TAU_MIN
    interval: int = 100
    prune_screen_frac: float = 0.2     # of image width
    clone_offset: float = 0.01         # meters along the accumulated gradient

    def __post_init__(self):
        if not 0.0 < self.tau_min < self.tau_max:
            raise ValueError("need 0 < tau_min < tau_max")
        if self.split_factor <= 1.0:
            raise ValueError("split_factor must exceed 1")


@dataclass
class ShapeStats:
    """Materialized scales sorted descending, with linearity and planarity."""

    sorted_scales: np.ndarray  # (N, 3), s1 >= s2 >= s3
    linearity: np.ndarray      # (N,) (s1-s2)/s1
    planarity: np.ndarray      # (N,) (s2-s3)/s1
    order: np.ndarray          # (N, 3) storage-axis permutation used to sort


def shape_stats(collection: GaussianCollection) -> ShapeStats:
    s = collection.scales().detach().cpu().numpy().astype(np.float64)
    order = np.argsort(-s, axis=1, kind="stable")
    ss = np.take_along_axis(s, order, axis=1)
    s1 = ss[:, 0]
    lin = (ss[:, 0] - ss[:, 1]) / s1
    pla = (ss[:, 1] - ss[:, 2]) / s1
    return ShapeStats(ss, lin, pla, order)


def _kind_name(kind) -> str:
    return GaussianKind(int(kind)).name


def salient_transform(collection: GaussianCollection, stats: ShapeStats,
                      config: DensifyConfig | None = None) -> list:
    """Upgrade/downgrade primitives in place after two consecutive
    qualifying shape evaluations. Returns the mutation events."""
    config = config or DensifyConfig()
    n = len(collection)
    if n == 0:
        return []
    kinds = collection.kinds.cpu().numpy()
    salient = kinds != GaussianKind.NON_SALIENT
    peak = np.maximum(stats.linearity, stats.planarity)
    # >= on the upper threshold so a primitive sitting exactly on it counts
    qualifies = np.where(salient, peak < config.tau_min, peak >= config.tau_max)
    counters = collection.transform_counters.cpu().numpy().astype(np.int64)
    counters = np.where(qualifies, counters + 1, 0)
    fire = counters >= 2
    counters[fire] = 0

    events = []
    if fire.any():
        quats = collection.quaternions.detach().cpu().numpy().astype(np.float64)
        mat_scales = collection.scales().detach().cpu().numpy().astype(np.float64)
        new_logs = {}
        new_quats = {}
        new_kinds = {}
        for i in np.nonzero(fire)[0]:
            i = int(i)
            if salient[i]:
                # shape-preserving: materialized diagonal becomes 3 free scales
                new_logs[i] = np.log(mat_scales[i])
                new_kinds[i] = GaussianKind.NON_SALIENT
            else:
                s1, s2, s3 = stats.sorted_scales[i]
                q = quats[i] / np.linalg.norm(quats[i])
                r = quat_to_matrix_np(q)[:, stats.order[i]]
                if np.linalg.det(r) < 0:
                    r[:, 1] *= -1.0  # restore a proper rotation; axes unchanged
                if stats.linearity[i] >= stats.planarity[i]:
                    par, perp = s1, 0.5 * (s2 + s3)
                    new_logs[i] = np.log([par, perp, perp])
                    new_kinds[i] = GaussianKind.EDGE_SALIENT
                else:
                    perp, par = 0.5 * (s1 + s2), s3
                    new_logs[i] = np.log([perp, par, par])
                    new_kinds[i] = GaussianKind.PLANAR_SALIENT
                new_quats[i] = matrix_to_quat_np(r)
            events.append({
                "event": "downgrade" if salient[i] else "upgrade",
                "parent_id": i, "child_ids": [],
                "kind": _kind_name(new_kinds[i]),
            })
        with torch.no_grad():
            for i, logs in new_logs.items():
                collection.log_scales[i] = torch.as_tensor(logs, dtype=collection.dtype)
            for i, q in new_quats.items():
                collection.quaternions[i] = torch.as_tensor(q, dtype=collection.dtype)
        for i, k in new_kinds.items():
            collection.kinds[i] = int(k)
    collection.transform_counters = torch.as_tensor(
        np.clip(counters, 0, 127), dtype=torch.int8)
    return events


@dataclass
class DensifyResult:
    collection: GaussianCollection
    kept: np.ndarray  # bool per input row: survived without being split/pruned
    events: list

    @property
    def changed(self) -> bool:
        return bool(self.events)


def densify_and_prune(collection: GaussianCollection, mean_grad2d: np.ndarray,
                      grad3d: np.ndarray, max_radius: np.ndarray | None,
                      config: DensifyConfig | None = None,
                      image_width: int | None = None,
                      rng: np.random.Generator | None = None) -> DensifyResult:
    """One density-control step: prune, then split or clone primitives whose
    accumulated view-space gradient exceeds the threshold.

    The result's collection is a fresh object when anything changed (rows in
    original order minus pruned/split parents, children appended), otherwise
    the input itself. `mean_grad2d` is the per-row mean view-space gradient
    norm, `grad3d` the accumulated node-local positional gradient (used for
    clone offsets and planar in-plane split direction), `max_radius` the
    largest screen-space footprint seen since the last step.
    """
    config = config or DensifyConfig()
    rng = rng or np.random.default_rng()
    n = len(collection)
    if n == 0:
        return DensifyResult(collection, np.ones(0, dtype=bool), [])
    mean_grad2d = np.asarray(mean_grad2d, dtype=np.float64).reshape(n)
    grad3d = np.asarray(grad3d, dtype=np.float64).reshape(n, 3)

    opac = collection.opacities().detach().cpu().numpy()
    prune = opac < config.prune_opacity
    if max_radius is not None and image_width:
        rad = np.asarray(max_radius, dtype=np.float64).reshape(n)
        finite = np.isfinite(rad)
        prune |= finite & (rad > config.prune_screen_frac * image_width)

    scales = collection.scales().detach().cpu().numpy().astype(np.float64)
    over = (mean_grad2d > config.grad_threshold) & ~prune
    split = over & (scales.max(axis=1) > config.split_scale_threshold)
    clone = over & ~split
    keep = ~(prune | split)

    if not (prune.any() or split.any() or clone.any()):
        return DensifyResult(collection, keep, [])

    means = collection.means.detach().cpu().numpy().astype(np.float64)
    quats = collection.quaternions.detach().cpu().numpy().astype(np.float64)
    logs = collection.log_scales.detach().cpu().numpy().astype(np.float64)
    opacl = collection.opacity_logits.detach().cpu().numpy().astype(np.float64)
    refll = collection.reflectance_logits.detach().cpu().numpy().astype(np.float64)
    sh = collection.sh.detach().cpu().numpy().astype(np.float64)
    kinds = collection.kinds.cpu().numpy()
    log_f = np.log(config.split_factor)

    events = []
    child = {k: [] for k in ("mean", "quat", "logs", "opacl", "refll", "sh", "kind")}
    next_id = int(keep.sum())

    def emit(i, mean, row_logs):
        child["mean"].append(mean)
        child["quat"].append(quats[i])
        child["logs"].append(row_logs)
        child["opacl"].append(opacl[i])
        child["refll"].append(refll[i])
        child["sh"].append(sh[i])
        child["kind"].append(kinds[i])

    for i in np.nonzero(prune | split | clone)[0]:
        i = int(i)
        name = _kind_name(kinds[i])
        if prune[i]:
            events.append({"event": "prune", "parent_id": i, "child_ids": [],
                           "kind": name})
            continue
        if split[i]:
            q = quats[i] / np.linalg.norm(quats[i])
            r = quat_to_matrix_np(q)
            k = kinds[i]
            if k == GaussianKind.EDGE_SALIENT:
                off = 0.5 * np.exp(logs[i, 0]) * r[:, 0]
                child_logs = logs[i] - log_f
            elif k == GaussianKind.PLANAR_SALIENT:
                normal = r[:, 2]
                g = grad3d[i] - np.dot(grad3d[i], normal) * normal
                gn = np.linalg.norm(g)
                u = g / gn if gn > 1e-12 else r[:, 0]
                off = 0.5 * np.exp(logs[i, 0]) * u
                child_logs = logs[i].copy()
                child_logs[0] -= log_f  # in-plane shrinks, normal scale stays
            else:
                child_logs = logs[i] - log_f
                off = None
            ids = [next_id, next_id + 1]
            for sgn in (1.0, -1.0):
                if off is None:  # sample from the parent footprint
                    o = r @ (np.exp(logs[i]) * rng.standard_normal(3))
                else:
                    o = sgn * off
                emit(i, means[i] + o, child_logs)
            events.append({"event": "split", "parent_id": i, "child_ids": ids,
                           "kind": name})
            next_id += 2
        else:
            g = grad3d[i]
            gn = np.linalg.norm(g)
            o = config.clone_offset * g / gn if gn > 1e-12 else np.zeros(3)
            emit(i, means[i] + o, logs[i])
            events.append({"event": "clone", "parent_id": i,
                           "child_ids": [next_id], "kind": name})
            next_id += 1

    new = collection.select(keep)
    if child["mean"]:
        kids = GaussianCollection(
            np.array(child["mean"]), np.array(child["quat"]),
            np.array(child["logs"]), np.array(child["opacl"]),
            np.array(child["refll"]), np.array(child["sh"]),
            np.array(child["kind"], dtype=np.uint8), dtype=collection.dtype)
        new = GaussianCollection.concatenate(new, kids)
    return DensifyResult(new, keep, events)


class GradientAccumulator:
    """Per-primitive densification statistics gathered across render steps.

    Rows follow the flattened world layout: background first, then each
    object's members in scene order.
    """

    def __init__(self, total: int):
        self.total = total
        self.sum2d = np.zeros(total)
        self.count = np.zeros(total, dtype=np.int64)
        self.max_radius = np.zeros(total)
        self.grad3d = np.zeros((total, 3))

    def add_view(self, aux: dict):
        """Fold one rendered frame's screen-space stats in (after backward)."""
        if not aux:
            return
        vis = aux["visible"].cpu().numpy()
        g = aux["mean2d"].grad
        if g is not None:
            self.sum2d[vis] += g.detach().norm(dim=-1).cpu().numpy()
            self.count[vis] += 1
        rad = aux["radius"].detach().cpu().numpy()
        finite = np.isfinite(rad)
        idx = vis[finite]
        self.max_radius[idx] = np.maximum(self.max_radius[idx], rad[finite])

    def add_means_grad(self, offset: int, grad):
        if grad is not None:
            g = grad.detach().cpu().numpy()
            self.grad3d[offset:offset + len(g)] += g

    def mean_grad2d(self) -> np.ndarray:
        return self.sum2d / np.maximum(self.count, 1)

    def slices(self, start: int, count: int):
        sl = slice(start, start + count)
        return self.mean_grad2d()[sl], self.grad3d[sl], self.max_radius[sl]

    def reset(self, total: int | None = None):
        self.__init__(self.total if total is None else total)


class MutationJournal:
    """Line-delimited JSON log of population mutations, one event per line."""

    def __init__(self, path):
        self.path = str(path)
        self._fh = open(self.path, "a")

    def log(self, iteration: int, events: list, node: str | None = None):
        for e in events:
            rec = {"iter": int(iteration), **e}
            if node is not None:
                rec["node"] = node
            self._fh.write(json.dumps(rec) + "\n")
        if events:
            self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
