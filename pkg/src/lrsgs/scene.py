"""Optimizable Gaussian scene: primitive collections, scene graph, sky model.

Three primitive kinds share one storage layout. Non-salient Gaussians carry
three log-scales; edge and planar primitives carry two (the third column of
``log_scales`` is inert: it never enters the forward pass for those rows, so
it receives zero gradient and never moves). The materialized scale diagonal
is

    non-salient : (s1, s2, s3)          = exp(col0, col1, col2)
    edge        : (par, perp, perp)     = exp(col0, col1, col1)
    planar      : (perp, perp, par)     = exp(col0, col0, col1)

so the special direction is always a fixed rotation column: first for edge,
third for planar.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
import torch

from .errors import DimensionMismatch, EmptyInput, FrameOutOfRange
from .features import FeatureKind
from .geometry import (
    eval_sh,
    inverse_sigmoid,
    matrix_to_quat_np,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    quat_to_matrix,
    rgb_to_sh_dc,
)

SH_DEGREE = 2
SH_COEFFS = (SH_DEGREE + 1) ** 2
SKY_SHAPE = (32, 64)

CHECKPOINT_MAGIC = b"LRSG"

INIT_OPACITY = 0.1
INIT_ASPECT = 4.0  # perp-to-parallel starting ratio for salient primitives
REFL_INIT_CLAMP = (0.01, 0.99)


class GaussianKind(IntEnum):
    NON_SALIENT = 0
    EDGE_SALIENT = 1
    PLANAR_SALIENT = 2


def _tensor(x, dtype=torch.float32):
    if isinstance(x, torch.Tensor):
        return x.detach().to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


class GaussianCollection:
    """A batch of Gaussian primitives with shared-layout optimizable tensors.

    Fields: means (N,3), quaternions (N,4) wxyz, log_scales (N,3),
    opacity_logits (N,), reflectance_logits (N,), sh (N,K,3),
    kinds (N,) uint8, transform_counters (N,) int8.
    """

    PARAM_NAMES = ("mean", "rotation", "scales", "opacity", "reflectance", "sh")

    def __init__(self, means, quaternions, log_scales, opacity_logits,
                 reflectance_logits, sh, kinds, transform_counters=None,
                 requires_grad=True, dtype=torch.float32):
        self.dtype = dtype
        self.means = _tensor(means, dtype).reshape(-1, 3)
        n = self.means.shape[0]
        self.quaternions = _tensor(quaternions, dtype).reshape(n, 4)
        self.log_scales = _tensor(log_scales, dtype).reshape(n, 3)
        self.opacity_logits = _tensor(opacity_logits, dtype).reshape(n)
        self.reflectance_logits = _tensor(reflectance_logits, dtype).reshape(n)
        self.sh = _tensor(sh, dtype).reshape(n, SH_COEFFS, 3)
        self.kinds = _tensor(kinds, torch.uint8).reshape(n)
        if transform_counters is None:
            transform_counters = torch.zeros(n, dtype=torch.int8)
        self.transform_counters = _tensor(transform_counters, torch.int8).reshape(n)
        if requires_grad:
            for t in self._param_tensors():
                t.requires_grad_(True)

    def _param_tensors(self):
        return (self.means, self.quaternions, self.log_scales,
                self.opacity_logits, self.reflectance_logits, self.sh)

    def parameters(self) -> dict:
        """Name -> tensor, aligned with the optimizer's parameter groups."""
        return {
            "mean": self.means,
            "rotation": self.quaternions,
            "scales": self.log_scales,
            "opacity": self.opacity_logits,
            "reflectance": self.reflectance_logits,
            "sh": self.sh,
        }

    def __len__(self):
        return self.means.shape[0]

    def as_world(self) -> "WorldGaussians":
        """View this collection as an already-world-frame flat batch."""
        return WorldGaussians(
            self.means, quat_normalize(self.quaternions), self.scales(),
            self.opacities(), self.reflectances(), self.sh, None,
            [(self, 0, len(self))])

    def scale_dof(self) -> torch.Tensor:
        """Scale degrees of freedom per primitive: 3 non-salient, 2 salient."""
        return torch.where(self.kinds == GaussianKind.NON_SALIENT, 3, 2)

    def scales(self) -> torch.Tensor:
        """Materialized per-axis stddevs (N,3); inert columns never touched."""
        s = torch.exp(self.log_scales)
        edge = (self.kinds == GaussianKind.EDGE_SALIENT).unsqueeze(-1)
        planar = (self.kinds == GaussianKind.PLANAR_SALIENT).unsqueeze(-1)
        c0, c1, c2 = s[:, 0:1], s[:, 1:2], s[:, 2:3]
        sx = c0
        sy = torch.where(planar, c0, c1)
        sz = torch.where(edge | planar, c1, c2)
        return torch.cat([sx, sy, sz], dim=-1)

    def covariance(self) -> torch.Tensor:
        """World-frame-agnostic 3x3 covariances R diag(s^2) R^T, shape (N,3,3)."""
        r = quat_to_matrix(quat_normalize(self.quaternions))
        m = r * self.scales().unsqueeze(-2)  # scale the columns
        return m @ m.transpose(-1, -2)

    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def reflectances(self) -> torch.Tensor:
        return torch.sigmoid(self.reflectance_logits)

    def detach_arrays(self) -> dict:
        return {
            "mean": self.means.detach().cpu().numpy(),
            "quaternion": self.quaternions.detach().cpu().numpy(),
            "log_scales": self.log_scales.detach().cpu().numpy(),
            "opacity_logit": self.opacity_logits.detach().cpu().numpy(),
            "reflectance_logit": self.reflectance_logits.detach().cpu().numpy(),
            "sh": self.sh.detach().cpu().numpy(),
            "kind": self.kinds.cpu().numpy(),
            "transform_counter": self.transform_counters.cpu().numpy(),
        }

    def select(self, index) -> "GaussianCollection":
        """New collection from rows (boolean mask or index array), detached."""
        if isinstance(index, np.ndarray):
            index = torch.from_numpy(index)
        return GaussianCollection(
            self.means.detach()[index].clone(),
            self.quaternions.detach()[index].clone(),
            self.log_scales.detach()[index].clone(),
            self.opacity_logits.detach()[index].clone(),
            self.reflectance_logits.detach()[index].clone(),
            self.sh.detach()[index].clone(),
            self.kinds[index].clone(),
            self.transform_counters[index].clone(),
            dtype=self.dtype,
        )

    @classmethod
    def concatenate(cls, a: "GaussianCollection", b: "GaussianCollection") -> "GaussianCollection":
        return cls(
            torch.cat([a.means.detach(), b.means.detach()]),
            torch.cat([a.quaternions.detach(), b.quaternions.detach()]),
            torch.cat([a.log_scales.detach(), b.log_scales.detach()]),
            torch.cat([a.opacity_logits.detach(), b.opacity_logits.detach()]),
            torch.cat([a.reflectance_logits.detach(), b.reflectance_logits.detach()]),
            torch.cat([a.sh.detach(), b.sh.detach()]),
            torch.cat([a.kinds, b.kinds]),
            torch.cat([a.transform_counters, b.transform_counters]),
            dtype=a.dtype,
        )

    @classmethod
    def empty(cls) -> "GaussianCollection":
        z = np.zeros((0,))
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), z, z,
                   np.zeros((0, SH_COEFFS, 3)), np.zeros(0, dtype=np.uint8))

    @classmethod
    def single(cls, kind: GaussianKind, mean, scales, quaternion=(1.0, 0.0, 0.0, 0.0),
               opacity=INIT_OPACITY, reflectance=0.5, rgb=(0.5, 0.5, 0.5),
               dtype=torch.float32) -> "GaussianCollection":
        """One primitive. `scales` are linear stddevs in storage-column order:
        3 values for non-salient, (par, perp) for edge, (perp, par) for planar.
        """
        kind = GaussianKind(kind)
        scales = np.asarray(scales, dtype=np.float64)
        log3 = np.zeros(3)
        if kind == GaussianKind.NON_SALIENT:
            if scales.shape != (3,):
                raise DimensionMismatch("non-salient primitive needs 3 scales")
            log3[:] = np.log(scales)
        else:
            if scales.shape != (2,):
                raise DimensionMismatch("salient primitive needs 2 scales")
            log3[:2] = np.log(scales)
        sh = np.zeros((SH_COEFFS, 3))
        sh[0] = rgb_to_sh_dc(rgb)
        return cls(
            np.asarray(mean, dtype=np.float64)[None],
            np.asarray(quaternion, dtype=np.float64)[None],
            log3[None],
            np.array([inverse_sigmoid(opacity)]),
            np.array([inverse_sigmoid(reflectance)]),
            sh[None],
            np.array([int(kind)], dtype=np.uint8),
            dtype=dtype,
        )


class SkyModel:
    """Optimizable equirectangular environment color, bilinear directional lookup."""

    def __init__(self, env_map=None, height=SKY_SHAPE[0], width=SKY_SHAPE[1],
                 dtype=None):
        if env_map is None:
            env_map = torch.full((height, width, 3), 0.5)
        if dtype is None:
            dtype = env_map.dtype if isinstance(env_map, torch.Tensor) \
                else torch.float32
        self.env_map = _tensor(env_map, dtype)
        if self.env_map.ndim != 3 or self.env_map.shape[-1] != 3:
            raise DimensionMismatch("sky map must be (H, W, 3)")
        self.env_map.requires_grad_(True)

    @property
    def shape(self):
        return tuple(self.env_map.shape[:2])

    def sample(self, dirs: torch.Tensor) -> torch.Tensor:
        """Colors for unit view directions (M,3), clamped to [0,1]."""
        h, w = self.shape
        d = dirs / dirs.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        theta = torch.acos(d[:, 2].clamp(-1.0, 1.0))  # polar from +z
        phi = torch.atan2(d[:, 1], d[:, 0])
        u = (phi / (2.0 * torch.pi) + 0.5) * w - 0.5
        v = theta / torch.pi * h - 0.5
        u0 = torch.floor(u)
        v0 = torch.floor(v)
        fu = (u - u0).unsqueeze(-1)
        fv = (v - v0).unsqueeze(-1)
        u0 = u0.long() % w
        u1 = (u0 + 1) % w  # longitude wraps
        v0 = v0.long().clamp(0, h - 1)
        v1 = (v0 + 1).clamp(0, h - 1)  # latitude clamps at the poles
        e = self.env_map
        c = ((e[v0, u0] * (1 - fu) + e[v0, u1] * fu) * (1 - fv)
             + (e[v1, u0] * (1 - fu) + e[v1, u1] * fu) * fv)
        return c.clamp(0.0, 1.0)


@dataclass
class ObjectNode:
    """Rigid object: its Gaussians plus an optimizable per-frame pose track."""

    gaussians: GaussianCollection
    pose_quats: torch.Tensor  # (F, 4) object->world rotation, wxyz
    pose_trans: torch.Tensor  # (F, 3)
    bbox: np.ndarray  # (3,) extents, meters

    @classmethod
    def from_transforms(cls, gaussians, transforms, bbox,
                        dtype=torch.float32) -> "ObjectNode":
        quats = np.stack([matrix_to_quat_np(t.rotation) for t in transforms])
        trans = np.stack([t.translation for t in transforms])
        node = cls(gaussians, _tensor(quats, dtype), _tensor(trans, dtype),
                   np.asarray(bbox, dtype=np.float64))
        node.pose_quats.requires_grad_(True)
        node.pose_trans.requires_grad_(True)
        return node

    def pose_parameters(self):
        return [self.pose_quats, self.pose_trans]


@dataclass
class SceneGraph:
    background: GaussianCollection
    objects: list = field(default_factory=list)
    sky: SkyModel = field(default_factory=SkyModel)
    frame_count: int = 1

    def __post_init__(self):
        for obj in self.objects:
            if obj.pose_quats.shape[0] != self.frame_count:
                raise DimensionMismatch(
                    f"object has {obj.pose_quats.shape[0]} poses, "
                    f"scene has {self.frame_count} frames")

    def nodes(self):
        yield self.background
        for obj in self.objects:
            yield obj.gaussians


@dataclass
class WorldGaussians:
    """Scene graph flattened into world frame for one time step.

    segments maps flattened row ranges back to their source collections
    (for densification statistics). sh_frames, when set, holds a per-row
    quaternion taking world directions into the frame the SH coefficients
    live in (object rotation followed along).
    """

    means: torch.Tensor
    quaternions: torch.Tensor
    scales: torch.Tensor
    opacities: torch.Tensor
    reflectances: torch.Tensor
    sh: torch.Tensor
    sh_frames: torch.Tensor | None
    segments: list

    def __len__(self):
        return self.means.shape[0]

    def covariance(self) -> torch.Tensor:
        r = quat_to_matrix(quat_normalize(self.quaternions))
        m = r * self.scales.unsqueeze(-2)
        return m @ m.transpose(-1, -2)

    def colors(self, view_dirs: torch.Tensor) -> torch.Tensor:
        """SH colors along per-row world view directions; raw +0.5, unclamped."""
        d = view_dirs / view_dirs.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        if self.sh_frames is not None:
            # conjugate rotates world dirs back into the node-local SH frame
            conj = torch.cat([self.sh_frames[:, :1], -self.sh_frames[:, 1:]], dim=-1)
            d = quat_rotate(conj, d)
        return eval_sh(self.sh, d, SH_DEGREE) + 0.5


def world_gaussians(scene: SceneGraph, frame: int) -> WorldGaussians:
    """Flatten background + posed objects into a single world-frame batch."""
    if not 0 <= frame < scene.frame_count:
        raise FrameOutOfRange(f"frame {frame} outside [0, {scene.frame_count})")
    bg = scene.background
    means = [bg.means]
    quats = [quat_normalize(bg.quaternions)]
    scales = [bg.scales()]
    opac = [bg.opacities()]
    refl = [bg.reflectances()]
    sh = [bg.sh]
    frames = [None]
    segments = [(bg, 0, len(bg))]
    offset = len(bg)
    for obj in scene.objects:
        g = obj.gaussians
        pq = quat_normalize(obj.pose_quats[frame])
        means.append(quat_rotate(pq.expand(len(g), 4), g.means) + obj.pose_trans[frame])
        quats.append(quat_multiply(pq.expand(len(g), 4), quat_normalize(g.quaternions)))
        scales.append(g.scales())
        opac.append(g.opacities())
        refl.append(g.reflectances())
        sh.append(g.sh)
        frames.append(pq.expand(len(g), 4))
        segments.append((g, offset, len(g)))
        offset += len(g)
    if scene.objects:
        ident = torch.zeros(len(bg), 4, dtype=bg.dtype)
        ident[:, 0] = 1.0
        frames[0] = ident
        sh_frames = torch.cat(frames)
    else:
        sh_frames = None
    return WorldGaussians(
        torch.cat(means), torch.cat(quats), torch.cat(scales), torch.cat(opac),
        torch.cat(refl), torch.cat(sh), sh_frames, segments)


def _orthonormal_from_axis(axis: np.ndarray, column: int) -> np.ndarray:
    """Right-handed basis with `axis` in the given column (0 or 2)."""
    d = axis / np.linalg.norm(axis)
    helper = np.zeros(3)
    helper[int(np.argmin(np.abs(d)))] = 1.0
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    if column == 0:
        return np.column_stack([d, e1, e2])
    return np.column_stack([e1, e2, d])


def init_from_features(sweep, kinds: np.ndarray, sfm_positions=None,
                       sfm_colors=None) -> GaussianCollection:
    """Seed a background collection from labeled sweep points and SfM points.

    Edge-type labels become edge primitives aligned to the local ring tangent;
    planar labels become planar primitives aligned to the estimated normal;
    SfM points become isotropic non-salient primitives sized by their 3-NN
    mean distance. Reflectance logits start at the calibrated value.
    """
    kinds = np.asarray(kinds)
    if sfm_positions is None:
        sfm_positions = np.zeros((0, 3))
    sfm_positions = np.asarray(sfm_positions, dtype=np.float64).reshape(-1, 3)
    labeled = np.flatnonzero(kinds != FeatureKind.NONE)
    if len(labeled) == 0 and len(sfm_positions) == 0:
        raise EmptyInput("no feature or SfM points to initialize from")

    means, quats, logs, opac, refl, shs, gk = [], [], [], [], [], [], []

    def push(mean, rotation, scales2or3, kind, reflectance, rgb):
        means.append(mean)
        quats.append(matrix_to_quat_np(rotation) if rotation.ndim == 2 else rotation)
        row = np.zeros(3)
        row[: len(scales2or3)] = np.log(scales2or3)
        logs.append(row)
        opac.append(inverse_sigmoid(INIT_OPACITY))
        refl.append(inverse_sigmoid(np.clip(reflectance, *REFL_INIT_CLAMP)))
        coef = np.zeros((SH_COEFFS, 3))
        coef[0] = rgb_to_sh_dc(rgb)
        shs.append(coef)
        gk.append(int(kind))

    if len(labeled) > 0:
        positions = sweep.positions
        # ring-tangent lookup: neighbor by azimuth order within the same ring
        order_of = {}
        for r in np.unique(sweep.ring):
            ridx = np.flatnonzero(sweep.ring == r)
            ridx = ridx[np.argsort(sweep.azimuth_index[ridx], kind="stable")]
            for pos_in_ring, j in enumerate(ridx):
                order_of[j] = (ridx, pos_in_ring)
        for j in labeled:
            ridx, pos_in_ring = order_of[j]
            if pos_in_ring + 1 < len(ridx):
                nb = ridx[pos_in_ring + 1]
            else:
                nb = ridx[pos_in_ring - 1]
            delta = positions[nb] - positions[j]
            spacing = float(np.linalg.norm(delta))
            if spacing < 1e-12:
                continue
            mid = 0.5  # feature points carry no color
            if kinds[j] == FeatureKind.GEOMETRIC_PLANAR:
                rot = _orthonormal_from_axis(sweep.normals[j], column=2)
                push(positions[j], rot, (spacing, spacing / INIT_ASPECT),
                     GaussianKind.PLANAR_SALIENT, sweep.reflectance[j], (mid,) * 3)
            else:
                rot = _orthonormal_from_axis(delta / spacing, column=0)
                push(positions[j], rot, (spacing, spacing / INIT_ASPECT),
                     GaussianKind.EDGE_SALIENT, sweep.reflectance[j], (mid,) * 3)

    if len(sfm_positions) > 0:
        if sfm_colors is None:
            sfm_colors = np.full((len(sfm_positions), 3), 0.5)
        sfm_colors = np.asarray(sfm_colors, dtype=np.float64).reshape(-1, 3)
        if len(sfm_positions) > 1:
            d2 = np.sum((sfm_positions[:, None] - sfm_positions[None]) ** 2, axis=-1)
            np.fill_diagonal(d2, np.inf)
            k = min(3, len(sfm_positions) - 1)
            nn = np.sqrt(np.partition(d2, k - 1, axis=1)[:, :k])
            sizes = nn.mean(axis=1)
        else:
            sizes = np.full(1, 0.1)
        for j in range(len(sfm_positions)):
            s = max(float(sizes[j]), 1e-4)
            push(sfm_positions[j], np.eye(3), (s, s, s),
                 GaussianKind.NON_SALIENT, 0.5, sfm_colors[j])

    if not means:
        raise EmptyInput("all candidate points were degenerate")
    return GaussianCollection(
        np.stack(means), np.stack(quats), np.stack(logs), np.array(opac),
        np.array(refl), np.stack(shs), np.array(gk, dtype=np.uint8))


# -- checkpoint container ----------------------------------------------------
# magic "LRSG", uint32 little-endian header length, JSON header, then raw
# arrays. Per Gaussian node, field order: mean f32 (N,3), quaternion f32
# (N,4), log-scales f32 (N,3), opacity_logit f32 (N,), reflectance_logit f32
# (N,), SH f32 (N,K,3), salience u8 (N,), transform_counter i8 (N,). After
# each object node: pose quats f32 (F,4), pose translations f32 (F,3), bbox
# f32 (3,). After all nodes: sky map f32 (H,W,3).


def _write_node(f, coll: GaussianCollection):
    a = coll.detach_arrays()
    f.write(a["mean"].astype("<f4").tobytes())
    f.write(a["quaternion"].astype("<f4").tobytes())
    f.write(a["log_scales"].astype("<f4").tobytes())
    f.write(a["opacity_logit"].astype("<f4").tobytes())
    f.write(a["reflectance_logit"].astype("<f4").tobytes())
    f.write(a["sh"].astype("<f4").tobytes())
    f.write(a["kind"].astype(np.uint8).tobytes())
    f.write(a["transform_counter"].astype(np.int8).tobytes())


def _read_node(f, n: int, k: int) -> GaussianCollection:
    def arr(shape, dtype="<f4"):
        count = int(np.prod(shape)) if shape else 0
        raw = np.frombuffer(f.read(count * np.dtype(dtype).itemsize), dtype=dtype)
        return raw.reshape(shape).copy()

    return GaussianCollection(
        arr((n, 3)), arr((n, 4)), arr((n, 3)), arr((n,)), arr((n,)),
        arr((n, k, 3)), arr((n,), np.uint8), arr((n,), np.int8))


def save_checkpoint(scene: SceneGraph, path) -> None:
    header = {
        "version": 1,
        "sh_degree": SH_DEGREE,
        "sh_coeffs": SH_COEFFS,
        "sky_shape": list(scene.sky.shape),
        "frame_count": scene.frame_count,
        "background_count": len(scene.background),
        "objects": [{"count": len(o.gaussians)} for o in scene.objects],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        _write_node(f, scene.background)
        for obj in scene.objects:
            _write_node(f, obj.gaussians)
            f.write(obj.pose_quats.detach().cpu().numpy().astype("<f4").tobytes())
            f.write(obj.pose_trans.detach().cpu().numpy().astype("<f4").tobytes())
            f.write(obj.bbox.astype("<f4").tobytes())
        f.write(scene.sky.env_map.detach().cpu().numpy().astype("<f4").tobytes())


def load_checkpoint(path) -> SceneGraph:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise DimensionMismatch(f"not a scene checkpoint: {path}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        k = header["sh_coeffs"]
        fc = header["frame_count"]
        background = _read_node(f, header["background_count"], k)
        objects = []
        for spec in header["objects"]:
            g = _read_node(f, spec["count"], k)
            pq = np.frombuffer(f.read(fc * 4 * 4), dtype="<f4").reshape(fc, 4).copy()
            pt = np.frombuffer(f.read(fc * 3 * 4), dtype="<f4").reshape(fc, 3).copy()
            bbox = np.frombuffer(f.read(3 * 4), dtype="<f4").astype(np.float64).copy()
            node = ObjectNode(g, _tensor(pq), _tensor(pt), bbox)
            node.pose_quats.requires_grad_(True)
            node.pose_trans.requires_grad_(True)
            objects.append(node)
        h, w = header["sky_shape"]
        raw = np.frombuffer(f.read(h * w * 3 * 4), dtype="<f4").reshape(h, w, 3).copy()
        sky = SkyModel(raw)
    return SceneGraph(background, objects, sky, fc)
