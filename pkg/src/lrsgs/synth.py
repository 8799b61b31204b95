"""Synthetic scenes with analytic ground truth for every pipeline stage.

Geometry is a handful of textured plane patches plus one rigid box on a
per-frame trajectory. Cameras and the beam grid ray-cast the same surfaces,
so rendered images, reflectance maps, depth, and simulated sweeps all agree
with each other by construction. Sweep intensity follows the forward model
I = rho * cos(alpha) / R^2 that the calibration stage inverts; a noiseless
simulate -> calibrate round trip recovers the surface reflectance exactly
up to the calibration normalizer.

World frame is y-down (matching the camera convention), sensor at the
origin: sweep coordinates are world coordinates.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import configparser
import numpy as np

from . import io
from .errors import FrameOutOfRange
from .geometry import RigidTransform, matrix_to_quat_np, quat_to_matrix_np
from .lidar import CameraModel, LidarSweep

# fixed directional light, mostly downward (+y is down)
LIGHT_DIR = np.array([-0.35, 0.9, -0.25]) / np.linalg.norm([-0.35, 0.9, -0.25])
AMBIENT = 0.45
DIFFUSE = 0.55

_EPS = 1e-9


@dataclass
class PlanePatch:
    """Finite rectangle: origin plus two orthogonal (non-unit) edge vectors.

    Albedo is a two-color checker when cell > 0, flat albedo_a otherwise.
    Reflectance is refl_a, switching to refl_b past band_at (fraction of the
    e1 extent) when a band is configured.
    """

    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    albedo_a: np.ndarray
    albedo_b: np.ndarray | None = None
    cell: float = 0.0
    refl_a: float = 0.5
    refl_b: float | None = None
    band_at: float | None = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.e1 = np.asarray(self.e1, dtype=np.float64)
        self.e2 = np.asarray(self.e2, dtype=np.float64)
        self.albedo_a = np.asarray(self.albedo_a, dtype=np.float64)
        if self.albedo_b is not None:
            self.albedo_b = np.asarray(self.albedo_b, dtype=np.float64)
        if not (0.0 <= self.refl_a <= 1.0):
            raise ValueError("reflectance out of [0,1]")
        if self.refl_b is not None and not (0.0 <= self.refl_b <= 1.0):
            raise ValueError("reflectance out of [0,1]")

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.e1, self.e2)
        return n / np.linalg.norm(n)

    @property
    def extents(self):
        return float(np.linalg.norm(self.e1)), float(np.linalg.norm(self.e2))

    def uv_of(self, points: np.ndarray):
        l1, l2 = self.extents
        rel = points - self.origin
        return rel @ (self.e1 / l1), rel @ (self.e2 / l2)

    def albedo(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        out = np.broadcast_to(self.albedo_a, (*a.shape, 3)).copy()
        if self.albedo_b is not None and self.cell > 0:
            parity = (np.floor(a / self.cell) + np.floor(b / self.cell)) % 2
            out[parity == 1] = self.albedo_b
        return out

    def reflectance(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        out = np.full(a.shape, self.refl_a)
        if self.refl_b is not None and self.band_at is not None:
            l1, _ = self.extents
            out[a / l1 >= self.band_at] = self.refl_b
        return out


@dataclass
class BoxObject:
    """Axis-aligned box in its own frame, rigid object->world pose per frame."""

    half: np.ndarray
    albedo: np.ndarray
    refl: float
    track: list

    def __post_init__(self):
        self.half = np.asarray(self.half, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)

    def pose(self, frame: int) -> RigidTransform:
        return self.track[frame]


@dataclass
class LidarRig:
    ring_count: int = 16
    points_per_ring: int = 280
    elev_range: tuple = (-0.1745, 0.6109)   # radians, positive is downward
    az_range: tuple = (-1.1345, 1.3090)
    max_range: float = 30.0


@dataclass
class SynthScene:
    planes: list
    box: BoxObject | None
    cameras: list
    held_out: list
    sky_color: np.ndarray
    lidar: LidarRig
    frame_count: int

    def __post_init__(self):
        self.sky_color = np.asarray(self.sky_color, dtype=np.float64)

    def check_frame(self, frame: int):
        if not (0 <= frame < self.frame_count):
            raise FrameOutOfRange(
                f"frame {frame} outside 0..{self.frame_count - 1}")


def _plane_cast(plane, origins, dirs):
    n = plane.normal
    denom = dirs @ n
    safe = np.where(np.abs(denom) > _EPS, denom, 1.0)
    t = ((plane.origin - origins) @ n) / safe
    valid = (np.abs(denom) > _EPS) & (t > 1e-6)
    p = origins + t[:, None] * dirs
    a, b = plane.uv_of(p)
    l1, l2 = plane.extents
    valid &= (a >= 0) & (a <= l1) & (b >= 0) & (b <= l2)
    return t, valid, a, b


def _box_cast(box, frame, origins, dirs):
    inv = box.pose(frame).inverse()
    o = inv.apply(origins)
    d = dirs @ inv.rotation.T
    safe = np.where(np.abs(d) > _EPS, d, _EPS)
    t1 = (-box.half - o) / safe
    t2 = (box.half - o) / safe
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    # parallel rays outside a slab never hit it
    outside = (np.abs(d) <= _EPS) & (np.abs(o) > box.half)
    lo[outside] = np.inf
    tmin = lo.max(axis=1)
    tmax = np.where(outside.any(axis=1), -np.inf, hi.min(axis=1))
    valid = (tmax >= tmin) & (tmin > 1e-6)
    axis = lo.argmax(axis=1)
    n_loc = np.zeros_like(o)
    rows = np.arange(len(o))
    n_loc[rows, axis] = -np.sign(safe[rows, axis])
    normal = n_loc @ box.pose(frame).rotation.T
    return tmin, valid, normal


def cast_rays(scene: SynthScene, frame: int, origins, dirs):
    """First-hit query. Returns dict of per-ray arrays; misses have hit=False."""
    scene.check_frame(frame)
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64),
                              np.asarray(dirs).shape).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    m = len(dirs)
    best_t = np.full(m, np.inf)
    albedo = np.zeros((m, 3))
    refl = np.zeros(m)
    normal = np.zeros((m, 3))

    for plane in scene.planes:
        t, valid, a, b = _plane_cast(plane, origins, dirs)
        closer = valid & (t < best_t)
        if closer.any():
            best_t[closer] = t[closer]
            albedo[closer] = plane.albedo(a[closer], b[closer])
            refl[closer] = plane.reflectance(a[closer], b[closer])
            normal[closer] = plane.normal

    if scene.box is not None:
        t, valid, n = _box_cast(scene.box, frame, origins, dirs)
        closer = valid & (t < best_t)
        if closer.any():
            best_t[closer] = t[closer]
            albedo[closer] = scene.box.albedo
            refl[closer] = scene.box.refl
            normal[closer] = n[closer]

    hit = np.isfinite(best_t)
    # make normals face the ray origin so incidence and shading see the front
    flip = (np.einsum("ij,ij->i", normal, dirs) > 0) & hit
    normal[flip] = -normal[flip]
    points = np.where(hit[:, None], origins + best_t[:, None] * dirs, 0.0)
    return {"t": best_t, "hit": hit, "point": points, "normal": normal,
            "albedo": albedo, "refl": refl}


def _shade(albedo, normal):
    lam = np.clip(-(normal @ LIGHT_DIR), 0.0, None)
    return np.clip(albedo * (AMBIENT + DIFFUSE * lam)[:, None], 0.0, 1.0)


def _camera_rays(camera: CameraModel, offsets):
    """World-frame unit rays through pixel (x+du, y+dv) for each offset pair."""
    r = camera.extrinsics.rotation
    center = -r.T @ camera.extrinsics.translation
    vv, uu = np.meshgrid(np.arange(camera.height, dtype=np.float64),
                         np.arange(camera.width, dtype=np.float64),
                         indexing="ij")
    rays = []
    for du, dv in offsets:
        x = (uu + du - camera.cx) / camera.fx
        y = (vv + dv - camera.cy) / camera.fy
        d = np.stack([x, y, np.ones_like(x)], axis=-1) @ r
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        rays.append(d)
    return center, rays


def render_gt(scene: SynthScene, camera: CameraModel, frame: int,
              supersample: int = 2) -> np.ndarray:
    """Ray-cast RGB with Lambert shading, sky for misses, box-filter AA."""
    s = max(1, int(supersample))
    offsets = [((i + 0.5) / s - 0.5, (j + 0.5) / s - 0.5)
               for j in range(s) for i in range(s)]
    center, rays = _camera_rays(camera, offsets)
    h, w = camera.height, camera.width
    out = np.zeros((h, w, 3))
    for d in rays:
        hitrec = cast_rays(scene, frame, center, d)
        shaded = _shade(hitrec["albedo"], hitrec["normal"])
        img = np.where(hitrec["hit"][:, None], shaded, scene.sky_color)
        out += img.reshape(h, w, 3)
    return out / len(rays)


def render_gt_reflectance(scene, camera, frame):
    """Per-pixel surface reflectance through pixel centers: (values, hit mask)."""
    center, (d,) = _camera_rays(camera, [(0.0, 0.0)])
    hitrec = cast_rays(scene, frame, center, d)
    h, w = camera.height, camera.width
    return (hitrec["refl"].reshape(h, w),
            hitrec["hit"].reshape(h, w))


def render_gt_depth(scene, camera, frame):
    """Camera-frame z through pixel centers: (values, hit mask)."""
    center, (d,) = _camera_rays(camera, [(0.0, 0.0)])
    hitrec = cast_rays(scene, frame, center, d)
    h, w = camera.height, camera.width
    z = camera.extrinsics.apply(hitrec["point"])[:, 2]
    return z.reshape(h, w), hitrec["hit"].reshape(h, w)


def simulate_sweep(scene: SynthScene, frame: int, intensity_sigma: float = 0.0,
                   range_sigma: float = 0.0, seed: int = 0) -> LidarSweep:
    """Beam-grid sweep from the origin; I = rho cos(alpha) / R^2, misses omitted."""
    scene.check_frame(frame)
    rig = scene.lidar
    elevs = np.linspace(*rig.elev_range, rig.ring_count)
    azs = np.linspace(*rig.az_range, rig.points_per_ring, endpoint=False)
    e, a = np.meshgrid(elevs, azs, indexing="ij")
    dirs = np.stack([np.cos(e) * np.sin(a), np.sin(e), np.cos(e) * np.cos(a)],
                    axis=-1).reshape(-1, 3)
    ring = np.repeat(np.arange(rig.ring_count), rig.points_per_ring)
    azidx = np.tile(np.arange(rig.points_per_ring), rig.ring_count)

    hitrec = cast_rays(scene, frame, np.zeros(3), dirs)
    keep = hitrec["hit"] & (hitrec["t"] <= rig.max_range)
    rng_dist = hitrec["t"][keep]
    d = dirs[keep]
    cos_a = np.abs(np.einsum("ij,ij->i", hitrec["normal"][keep], d))
    intensity = hitrec["refl"][keep] * cos_a / rng_dist**2

    if intensity_sigma > 0 or range_sigma > 0:
        rng = np.random.default_rng(seed + 1009 * frame)
        if intensity_sigma > 0:
            intensity = np.clip(
                intensity + rng.normal(0, intensity_sigma, len(intensity)),
                1e-9, None)
        if range_sigma > 0:
            rng_dist = np.clip(
                rng_dist + rng.normal(0, range_sigma, len(rng_dist)),
                1e-3, None)
    positions = d * rng_dist[:, None]
    return LidarSweep(positions, intensity, ring[keep], azidx[keep])


def _look_at(position, target):
    up_w = np.array([0.0, -1.0, 0.0])
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, up_w)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])
    return RigidTransform.from_rt(r, -r @ position)


def _camera(position, target, f=64.0, size=64):
    k = np.array([[f, 0.0, (size - 1) / 2.0],
                  [0.0, f, (size - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    return CameraModel(k, _look_at(np.asarray(position, dtype=np.float64),
                                   target), size, size)


# standard scene layout (meters, y down, ground at y = +0.9)
GROUND_Y = 0.9
BACK_Z = 5.0
SIDE_X = 1.8
WALL_TOP = -0.8
BAND_Z = 3.2
SKY_COLOR = (0.36, 0.40, 0.47)


def standard_scene(seed: int = 0, frames: int = 20, image_size: int = 64):
    """Corner room with a translating box and an RGB-invisible reflectance band.

    Ground and back wall carry checkers; the side wall is flat-colored but
    switches reflectance at z = BAND_Z, so only the reflectance channel can
    localize that edge. 8 training cameras on an arc plus 2 held-out ones.
    """
    rng = np.random.default_rng(seed)
    ground = PlanePatch(
        origin=(-2.6, GROUND_Y, 0.5),
        e1=(4.4, 0.0, 0.0), e2=(0.0, 0.0, 4.5),
        albedo_a=(0.38, 0.42, 0.36), albedo_b=(0.55, 0.59, 0.51), cell=1.1,
        refl_a=0.48)
    back = PlanePatch(
        origin=(-2.6, WALL_TOP, BACK_Z),
        e1=(4.4, 0.0, 0.0), e2=(0.0, 1.7, 0.0),
        albedo_a=(0.30, 0.38, 0.58), albedo_b=(0.44, 0.52, 0.72), cell=1.4,
        refl_a=0.55)
    side = PlanePatch(
        origin=(SIDE_X, WALL_TOP, 0.6),
        e1=(0.0, 0.0, 4.4), e2=(0.0, 1.7, 0.0),
        albedo_a=(0.52, 0.47, 0.42), cell=0.0,
        refl_a=0.34, refl_b=0.66, band_at=(BAND_Z - 0.6) / 4.4)

    track = [RigidTransform.from_rt(np.eye(3),
                                    np.array([-1.2 + 0.1 * f, 0.55, 3.2]))
             for f in range(frames)]
    box = BoxObject(half=(0.22, 0.35, 0.22), albedo=(0.55, 0.41, 0.32),
                    refl=0.58, track=track)

    # alternate aim between the room corner and the side wall band so both
    # the scene at large and the reflectance edge get multi-view coverage
    corner = np.array([0.25, 0.40, 4.3])
    band = np.array([SIDE_X, 0.30, BAND_Z])
    cameras = []
    for k in range(8):
        pos = np.array([-1.4 + 2.4 * k / 7.0,
                        0.18 + 0.18 * np.sin(np.pi * k / 7.0),
                        0.25 + 0.45 * (k % 4) / 3.0])
        pos += rng.normal(0, 0.03, 3)
        target = corner if k % 2 == 0 else band
        cameras.append(_camera(pos, target + rng.normal(0, 0.02, 3),
                               size=image_size, f=image_size))
    for pos, target in (((-0.5, 0.2, 0.55), band), ((0.4, 0.3, 0.35), corner)):
        p = np.asarray(pos) + rng.normal(0, 0.03, 3)
        cameras.append(_camera(p, target + rng.normal(0, 0.02, 3),
                               size=image_size, f=image_size))
    held_out = [False] * 8 + [True] * 2

    return SynthScene(planes=[ground, back, side], box=box, cameras=cameras,
                      held_out=held_out, sky_color=np.array(SKY_COLOR),
                      lidar=LidarRig(), frame_count=frames)


def standard_feature_config(rig: LidarRig) -> "FeatureConfig":
    """Feature thresholds matched to the rig's angular resolution.

    Corner-kink smoothness scales with the per-point azimuth step, so the
    edge threshold must too; a fixed threshold tuned for a coarse scanner
    goes silent on a fine one.
    """
    from .features import FeatureConfig
    step = (rig.az_range[1] - rig.az_range[0]) / rig.points_per_ring
    return FeatureConfig(c_edge=1.7 * step, c_plane=min(0.01, 0.8 * step))


def band_edge_segment(scene: SynthScene):
    """World endpoints of the side wall's reflectance band edge."""
    for plane in scene.planes:
        if plane.band_at is not None:
            p0 = plane.origin + plane.band_at * plane.e1
            return p0, p0 + plane.e2
    raise ValueError("scene has no reflectance band")


def _surface_samples(scene, per_plane, rng):
    """Random static-surface points with shaded colors, standing in for SfM.

    Background only: a moving object never survives SfM's rigidity check,
    its seeds come from the object point file instead.
    """
    pts, cols = [], []
    for plane in scene.planes:
        a = rng.uniform(0, 1, per_plane)
        b = rng.uniform(0, 1, per_plane)
        p = plane.origin + a[:, None] * plane.e1 + b[:, None] * plane.e2
        l1, l2 = plane.extents
        alb = plane.albedo(a * l1, b * l2)
        n = np.broadcast_to(plane.normal, p.shape)
        pts.append(p)
        cols.append(_shade(alb, n))
    return np.concatenate(pts), np.concatenate(cols)


_POINT_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                         ("red", "u1"), ("green", "u1"), ("blue", "u1")])


def _write_points(path, positions, colors):
    out = np.empty(len(positions), dtype=_POINT_DTYPE)
    out["x"], out["y"], out["z"] = positions.T.astype(np.float32)
    rgb = np.clip(colors * 255.0 + 0.5, 0, 255).astype(np.uint8)
    out["red"], out["green"], out["blue"] = rgb.T
    io.write_ply(path, out)


def _read_points(path):
    arr = io.read_ply(path)
    pos = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
    col = np.stack([arr["red"], arr["green"], arr["blue"]], axis=1) / 255.0
    return pos, col


def write_dataset(scene: SynthScene, out_dir, seed: int = 0,
                  intensity_sigma: float = 0.0, range_sigma: float = 0.0,
                  sfm_per_plane: int = 120):
    """Write frames, sweeps, cameras, seed points, and the manifest."""
    root = Path(out_dir)
    (root / "cameras").mkdir(parents=True, exist_ok=True)
    for k, cam in enumerate(scene.cameras):
        cam.save(root / "cameras" / f"cam_{k}.ini")

    for f in range(scene.frame_count):
        fdir = root / "frames" / f"{f:03d}"
        fdir.mkdir(parents=True, exist_ok=True)
        for k, cam in enumerate(scene.cameras):
            io.write_image_png(fdir / f"cam_{k}.png", render_gt(scene, cam, f))
            refl, mask = render_gt_reflectance(scene, cam, f)
            io.write_pfm(fdir / f"refl_{k}.pfm", refl)
            io.write_mask(io.mask_path(fdir / f"refl_{k}.pfm"), mask)
        simulate_sweep(scene, f, intensity_sigma, range_sigma,
                       seed=seed).save(fdir / "sweep.ply")

    rng = np.random.default_rng(seed + 77)
    pts, cols = _surface_samples(scene, sfm_per_plane, rng)
    _write_points(root / "sfm.ply", pts, cols)

    if scene.box is not None:
        odir = root / "object"
        odir.mkdir(exist_ok=True)
        rows = np.zeros((scene.frame_count, 7))
        for f in range(scene.frame_count):
            pose = scene.box.pose(f)
            rows[f, :4] = matrix_to_quat_np(pose.rotation)
            rows[f, 4:] = pose.translation
        io.write_matrix_txt(odir / "poses.txt", rows)
        io.write_matrix_txt(odir / "bbox.txt", scene.box.half[None])
        n_obj = max(24, sfm_per_plane // 2)
        face = rng.integers(0, 6, n_obj)
        local = rng.uniform(-1, 1, (n_obj, 3)) * scene.box.half
        axis = face // 2
        sign = np.where(face % 2 == 0, 1.0, -1.0)
        local[np.arange(n_obj), axis] = sign * scene.box.half[axis]
        n = np.zeros((n_obj, 3))
        n[np.arange(n_obj), axis] = sign
        _write_points(odir / "points.ply", local,
                      _shade(np.broadcast_to(scene.box.albedo, (n_obj, 3)), n))

    cfg = configparser.ConfigParser()
    cfg["dataset"] = {"frames": str(scene.frame_count),
                      "cameras": str(len(scene.cameras)),
                      "width": str(scene.cameras[0].width),
                      "height": str(scene.cameras[0].height)}
    cfg["splits"] = {"held_out": " ".join(
        str(k) for k, h in enumerate(scene.held_out) if h)}
    cfg["sky"] = {"color": " ".join(repr(float(v)) for v in scene.sky_color)}
    cfg["lidar"] = {"rings": str(scene.lidar.ring_count),
                    "points_per_ring": str(scene.lidar.points_per_ring),
                    "max_range": repr(scene.lidar.max_range)}
    cfg["object"] = {"present": "true" if scene.box is not None else "false"}
    with open(root / "manifest.ini", "w") as fh:
        cfg.write(fh)
    return root


@dataclass
class FrameData:
    images: list
    sweep: LidarSweep


@dataclass
class ObjectData:
    bbox: np.ndarray
    poses: list
    points: np.ndarray
    colors: np.ndarray


@dataclass
class Dataset:
    root: Path
    cameras: list
    held_out: list
    sky_color: np.ndarray
    frames: list
    obj: ObjectData | None = None
    sfm_points: np.ndarray | None = None
    sfm_colors: np.ndarray | None = None

    def gt_reflectance(self, frame: int, cam: int):
        path = self.root / "frames" / f"{frame:03d}" / f"refl_{cam}.pfm"
        return io.read_pfm(path), io.read_mask(io.mask_path(path))


def load_dataset(root) -> Dataset:
    root = Path(root)
    cfg = configparser.ConfigParser()
    if not cfg.read(root / "manifest.ini"):
        raise FileNotFoundError(root / "manifest.ini")
    n_frames = cfg.getint("dataset", "frames")
    n_cams = cfg.getint("dataset", "cameras")
    held = {int(v) for v in cfg["splits"]["held_out"].split()}
    sky = np.array([float(v) for v in cfg["sky"]["color"].split()])

    cameras = [CameraModel.load(root / "cameras" / f"cam_{k}.ini")
               for k in range(n_cams)]
    frames = []
    for f in range(n_frames):
        fdir = root / "frames" / f"{f:03d}"
        images = [io.read_image_png(fdir / f"cam_{k}.png")
                  for k in range(n_cams)]
        frames.append(FrameData(images, LidarSweep.load(fdir / "sweep.ply")))

    sfm_pts = sfm_cols = None
    if (root / "sfm.ply").exists():
        sfm_pts, sfm_cols = _read_points(root / "sfm.ply")

    obj = None
    if cfg.getboolean("object", "present", fallback=False):
        odir = root / "object"
        rows = np.atleast_2d(io.read_matrix_txt(odir / "poses.txt"))
        poses = [RigidTransform.from_rt(quat_to_matrix_np(r[:4]), r[4:])
                 for r in rows]
        bbox = np.atleast_2d(io.read_matrix_txt(odir / "bbox.txt"))[0]
        pts, cols = _read_points(odir / "points.ply")
        obj = ObjectData(bbox, poses, pts, cols)

    return Dataset(root, cameras, [k in held for k in range(n_cams)],
                   sky, frames, obj, sfm_pts, sfm_cols)
