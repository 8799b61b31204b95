"""LiDAR intensity calibration and sparse image projection.

Raw sweeps (position + intensity, indexed by ring/azimuth) are calibrated into
reflectance in [0,1] by inverting the range/incidence attenuation model, then
projected through a pinhole camera into sparse reflectance, gradient, and depth
images used as supervision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import io
from .errors import DegenerateNeighborhood, DimensionMismatch, EmptySweep
from .geometry import RigidTransform

EPS_COS = 0.05           # incidence-cosine floor; bounds 1/cos amplification at grazing angles
NORM_PERCENTILE = 99.0   # sweep normalization resists single-return outliers
GRAD_SEARCH_RADIUS = 2   # pixel search radius for sparse-image gradients


class LidarSweep:
    """Struct-of-arrays raw sweep: positions are sensor-frame meters."""

    def __init__(self, positions, intensity, ring, azimuth_index, timestamp=None):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.intensity = np.asarray(intensity, dtype=np.float64).reshape(n)
        self.ring = np.asarray(ring, dtype=np.int64).reshape(n)
        self.azimuth_index = np.asarray(azimuth_index, dtype=np.int64).reshape(n)
        if timestamp is None:
            timestamp = np.zeros(n)
        self.timestamp = np.asarray(timestamp, dtype=np.float64).reshape(n)
        self._validate()

    def _validate(self):
        if len(self.positions) and np.linalg.norm(self.positions, axis=1).min() <= 0:
            raise ValueError("sweep contains a return at the sensor origin")
        if len(self.ring) and self.ring.min() < 0:
            raise ValueError("negative ring index")
        for r in np.unique(self.ring):
            az = self.azimuth_index[self.ring == r]
            if len(np.unique(az)) != len(az):
                raise ValueError(f"duplicate azimuth_index on ring {r}")

    def __len__(self):
        return len(self.positions)

    def to_structured(self) -> np.ndarray:
        out = np.empty(len(self), dtype=io.SWEEP_DTYPE)
        out["x"], out["y"], out["z"] = self.positions.T.astype(np.float32)
        out["intensity"] = self.intensity.astype(np.float32)
        out["ring"] = self.ring.astype(np.uint16)
        out["azimuth_index"] = self.azimuth_index.astype(np.uint32)
        out["timestamp"] = self.timestamp
        return out

    @classmethod
    def from_structured(cls, arr: np.ndarray) -> "LidarSweep":
        pos = np.stack([arr["x"], arr["y"], arr["z"]], axis=1)
        return cls(pos, arr["intensity"], arr["ring"], arr["azimuth_index"], arr["timestamp"])

    def save(self, path):
        io.write_ply(path, self.to_structured())

    @classmethod
    def load(cls, path) -> "LidarSweep":
        return cls.from_structured(io.read_ply(path))


class CalibratedSweep:
    """Calibrated points: reflectance in [0,1], unit normals, incidence cosines."""

    def __init__(self, positions, reflectance, normals, incidence_cos, ring, azimuth_index):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.reflectance = np.asarray(reflectance, dtype=np.float64).reshape(n)
        self.normals = np.asarray(normals, dtype=np.float64).reshape(n, 3)
        self.incidence_cos = np.asarray(incidence_cos, dtype=np.float64).reshape(n)
        self.ring = np.asarray(ring, dtype=np.int64).reshape(n)
        self.azimuth_index = np.asarray(azimuth_index, dtype=np.int64).reshape(n)

    def __len__(self):
        return len(self.positions)

    def select(self, mask) -> "CalibratedSweep":
        return CalibratedSweep(
            self.positions[mask], self.reflectance[mask], self.normals[mask],
            self.incidence_cos[mask], self.ring[mask], self.azimuth_index[mask],
        )


@dataclass
class CalibrationDiagnostics:
    total_points: int = 0
    calibrated_points: int = 0
    dropped_degenerate: int = 0
    dropped_isolated: int = 0
    normalizer: float = 0.0


@dataclass
class SparseImage:
    """Per-pixel scalar image defined only where valid_mask is true."""

    values: np.ndarray
    valid_mask: np.ndarray
    point_index: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.values.shape != self.valid_mask.shape:
            raise DimensionMismatch(
                f"values {self.values.shape} vs mask {self.valid_mask.shape}")
        if self.point_index is None:
            self.point_index = np.full(self.values.shape, -1, dtype=np.int64)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @classmethod
    def empty(cls, width: int, height: int) -> "SparseImage":
        return cls(np.zeros((height, width)), np.zeros((height, width), dtype=bool))

    def save(self, path):
        io.write_pfm(path, self.values)
        io.write_mask(io.mask_path(path), self.valid_mask)

    @classmethod
    def load(cls, path) -> "SparseImage":
        return cls(io.read_pfm(path), io.read_mask(io.mask_path(path)))


class CameraModel:
    """Pinhole camera: K, extrinsics mapping source-frame points into the camera frame."""

    def __init__(self, k: np.ndarray, extrinsics: RigidTransform, width: int, height: int):
        self.k = np.asarray(k, dtype=np.float64)
        self.extrinsics = extrinsics
        self.width = int(width)
        self.height = int(height)
        if self.k.shape != (3, 3):
            raise ValueError("K must be 3x3")
        if self.k[1, 0] or self.k[2, 0] or self.k[2, 1] or self.k[0, 0] <= 0 or self.k[1, 1] <= 0:
            raise ValueError("K must be upper-triangular with positive focals")
        if not extrinsics.is_valid():
            raise ValueError("extrinsics is not a rigid transform")

    @property
    def fx(self):
        return self.k[0, 0]

    @property
    def fy(self):
        return self.k[1, 1]

    @property
    def cx(self):
        return self.k[0, 2]

    @property
    def cy(self):
        return self.k[1, 2]

    def with_extrinsics(self, extrinsics: RigidTransform) -> "CameraModel":
        return CameraModel(self.k, extrinsics, self.width, self.height)

    def save(self, path):
        io.write_camera_file(path, self.fx, self.fy, self.cx, self.cy,
                             self.extrinsics.matrix[:3], self.width, self.height)

    @classmethod
    def load(cls, path) -> "CameraModel":
        k, t, w, h = io.read_camera_file(path)
        return cls(k, t, w, h)

    def unproject(self, u, v, depth):
        """Pixel coordinates + camera-frame z -> camera-frame points."""
        x = (np.asarray(u, dtype=np.float64) - self.cx) / self.fx * depth
        y = (np.asarray(v, dtype=np.float64) - self.cy) / self.fy * depth
        return np.stack([x, y, np.asarray(depth, dtype=np.float64)], axis=-1)


def estimate_normal(p: np.ndarray, p1: np.ndarray, p2: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Unit normal of the plane through p spanned by its two neighbors, facing the sensor."""
    p = np.asarray(p, dtype=np.float64)
    d1 = p - np.asarray(p1, dtype=np.float64)
    d2 = p - np.asarray(p2, dtype=np.float64)
    cross = np.cross(d1, d2)
    denom = np.linalg.norm(d1) * np.linalg.norm(d2)
    if denom <= 0 or np.linalg.norm(cross) / denom <= tol:
        raise DegenerateNeighborhood("neighbor triangle is degenerate")
    n = cross / np.linalg.norm(cross)
    if np.dot(n, p) > 0:
        n = -n
    return n


def incidence_cos(p: np.ndarray, n: np.ndarray) -> float:
    """|p.n| / |p|, clamped to [EPS_COS, 1]."""
    p = np.asarray(p, dtype=np.float64)
    c = abs(float(np.dot(p, np.asarray(n, dtype=np.float64)))) / np.linalg.norm(p)
    return float(np.clip(c, EPS_COS, 1.0))


def _ring_views(sweep: LidarSweep):
    """Per-ring index arrays into the sweep, ordered by azimuth_index."""
    rings = {}
    for r in np.unique(sweep.ring):
        idx = np.flatnonzero(sweep.ring == r)
        rings[int(r)] = idx[np.argsort(sweep.azimuth_index[idx])]
    return rings


def calibrate_sweep(sweep: LidarSweep, neighborhood_k: int = 2):
    """Invert the intensity model into reflectance for every point with a stable normal.

    Raw reflectance is intensity * R^2 / cos(alpha); the sensor constant is
    unobservable and absorbed by dividing the sweep by its 99th percentile.
    Returns (CalibratedSweep, CalibrationDiagnostics). Points whose neighborhood
    is degenerate (or missing) are dropped and counted.
    """
    if len(sweep) == 0:
        raise EmptySweep("no points in sweep")
    rings = _ring_views(sweep)
    ring_ids = sorted(rings)

    n_total = len(sweep)
    normals = np.zeros((n_total, 3))
    ok = np.zeros(n_total, dtype=bool)
    degenerate = 0
    isolated = 0

    for r in ring_ids:
        order = rings[r]
        if len(order) < 2:
            isolated += len(order)
            continue
        pos = sweep.positions[order]
        # candidate adjacent rings for the cross-ring neighbor
        adjacent = [rr for rr in (r - 1, r + 1) if rr in rings]
        adj_idx = np.concatenate([rings[rr] for rr in adjacent]) if adjacent else None
        for j, pi in enumerate(order):
            p = pos[j]
            cands = []
            if j > 0:
                cands.append(pos[j - 1])
            if j + 1 < len(order):
                cands.append(pos[j + 1])
            cands.sort(key=lambda c: np.linalg.norm(p - c))
            p2 = _nearest_adjacent(sweep, p, sweep.azimuth_index[pi], adj_idx, neighborhood_k)
            if p2 is None:
                isolated += 1
                continue
            normal = None
            for p1 in cands:
                try:
                    normal = estimate_normal(p, p1, p2)
                    break
                except DegenerateNeighborhood:
                    continue
            if normal is None:
                degenerate += 1
                continue
            normals[pi] = normal
            ok[pi] = True

    diag = CalibrationDiagnostics(
        total_points=n_total,
        calibrated_points=int(ok.sum()),
        dropped_degenerate=degenerate,
        dropped_isolated=isolated,
    )
    if not ok.any():
        return CalibratedSweep(
            np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)), np.zeros(0),
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)), diag

    pos = sweep.positions[ok]
    nrm = normals[ok]
    rng = np.linalg.norm(pos, axis=1)
    cos = np.clip(np.abs(np.sum(pos * nrm, axis=1)) / rng, EPS_COS, 1.0)
    rho_raw = sweep.intensity[ok] * rng**2 / cos
    norm = float(np.percentile(rho_raw, NORM_PERCENTILE))
    diag.normalizer = norm
    reflectance = np.clip(rho_raw / max(norm, 1e-12), 0.0, 1.0)
    return CalibratedSweep(pos, reflectance, nrm, cos,
                           sweep.ring[ok], sweep.azimuth_index[ok]), diag


def _nearest_adjacent(sweep, p, azimuth, adj_idx, window):
    """Nearest point on an adjacent ring, searched within an azimuth window."""
    if adj_idx is None or len(adj_idx) == 0:
        return None
    near = adj_idx[np.abs(sweep.azimuth_index[adj_idx] - azimuth) <= window]
    if len(near) == 0:
        near = adj_idx
    d = np.linalg.norm(sweep.positions[near] - p, axis=1)
    return sweep.positions[near[int(np.argmin(d))]]


def project_to_camera(points: CalibratedSweep, camera: CameraModel):
    """Project calibrated points into per-pixel reflectance and depth images.

    Points behind the camera or out of bounds are dropped; pixel collisions keep
    the nearest return (ties broken by point index, so the result is independent
    of input order).
    """
    h, w = camera.height, camera.width
    refl = SparseImage.empty(w, h)
    depth = SparseImage.empty(w, h)
    if len(points) == 0:
        return refl, depth

    cam = camera.extrinsics.apply(points.positions)
    z = cam[:, 2]
    front = z > 0
    u = np.full(len(points), -1, dtype=np.int64)
    v = np.full(len(points), -1, dtype=np.int64)
    u[front] = np.floor(camera.fx * cam[front, 0] / z[front] + camera.cx + 0.5).astype(np.int64)
    v[front] = np.floor(camera.fy * cam[front, 1] / z[front] + camera.cy + 0.5).astype(np.int64)
    keep = front & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        return refl, depth
    # write far-to-near so the nearest return (then lowest index) lands last
    order = idx[np.lexsort((-idx, -z[idx]))]
    uu, vv = u[order], v[order]
    refl.values[vv, uu] = points.reflectance[order]
    refl.valid_mask[vv, uu] = True
    refl.point_index[vv, uu] = order
    depth.values[vv, uu] = z[order]
    depth.valid_mask[vv, uu] = True
    depth.point_index[vv, uu] = order
    return refl, depth


def gradient_neighbors(valid_mask: np.ndarray, radius: int = GRAD_SEARCH_RADIUS):
    """Per-pixel neighbor offsets for sparse-image gradients.

    For each pixel, the nearest valid neighbor offset in the horizontal and
    vertical directions (0 when none within the radius). At equal distance the
    positive direction (right/down) wins. The same offsets are reused on the
    rendered side so both gradient operands share one stencil.
    """
    valid = np.asarray(valid_mask, dtype=bool)
    h, w = valid.shape
    dj = np.zeros((h, w), dtype=np.int64)
    dk = np.zeros((h, w), dtype=np.int64)
    offsets = []
    for d in range(1, radius + 1):
        offsets.extend([d, -d])
    for off in offsets:
        shifted = np.zeros_like(valid)
        if off > 0:
            shifted[:, :-off] = valid[:, off:]
        else:
            shifted[:, -off:] = valid[:, :off]
        take = (dj == 0) & shifted
        dj[take] = off
    for off in offsets:
        shifted = np.zeros_like(valid)
        if off > 0:
            shifted[:-off, :] = valid[off:, :]
        else:
            shifted[-off:, :] = valid[:off, :]
        take = (dk == 0) & shifted
        dk[take] = off
    dj[~valid] = 0
    dk[~valid] = 0
    return dj, dk


def pixel_reflectance_gradient(reflectance: SparseImage, points: np.ndarray,
                               radius: int = GRAD_SEARCH_RADIUS) -> SparseImage:
    """3D-distance-normalized image gradient of a sparse reflectance image.

    points: (H, W, 3) per-pixel 3D positions (defined at valid pixels). A
    direction with no valid neighbor within the search radius contributes zero.
    """
    valid = reflectance.valid_mask
    vals = reflectance.values
    points = np.asarray(points, dtype=np.float64)
    if points.shape[:2] != valid.shape:
        raise DimensionMismatch(f"points {points.shape[:2]} vs image {valid.shape}")
    h, w = valid.shape
    dj, dk = gradient_neighbors(valid, radius)
    vv, uu = np.mgrid[0:h, 0:w]

    def term(du, dv):
        has = (du != 0) | (dv != 0)
        ju = np.clip(uu + du, 0, w - 1)
        jv = np.clip(vv + dv, 0, h - 1)
        diff = vals - vals[jv, ju]
        dist = np.linalg.norm(points - points[jv, ju], axis=-1)
        t = np.zeros((h, w))
        np.divide(diff, np.maximum(dist, 1e-12), out=t, where=has)
        return t

    tx = term(dj, np.zeros_like(dj))
    ty = term(np.zeros_like(dk), dk)
    g = np.sqrt(tx**2 + ty**2)
    g[~valid] = 0.0
    return SparseImage(g, valid.copy(), reflectance.point_index.copy())
