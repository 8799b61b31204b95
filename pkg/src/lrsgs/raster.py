"""Differentiable tiled rasterizer plus a brute-force float64 reference path.

Forward model per pixel: Gaussians sorted front-to-back by mean depth
(stable tie-break on storage index), alpha-composited with

    alpha_i = o_i * exp(-0.5 d^T Sigma2d^{-1} d), clamped to <= 0.99
    w_i     = alpha_i * prod_{j<i} (1 - alpha_j)

accumulating color, mean depth, reflectance, and total opacity. Sky color
fills the remaining transmittance on the color channel only; depth and
reflectance stay pure Gaussian signal.

The tiled path (16x16 tiles, footprint culling, transmittance cutoff) is
what training uses. `precise=True` removes every cutoff so the tiled path
and the reference path see the exact same terms; the reference path is an
independent dense numpy implementation used by the equivalence tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import OracleTooLarge
from .geometry import SH_C0, SH_C1, SH_C2
from .lidar import CameraModel
from .scene import SkyModel, WorldGaussians

TILE = 16
NEAR_PLANE = 0.2
CULL_MARGIN = 1.3  # keep means inside the screen rectangle scaled by this
COV2D_FLOOR = 0.3  # pixel^2, added to the projected covariance diagonal
ALPHA_MAX = 0.99
ORACLE_MAX_GAUSSIANS = 10_000


@dataclass
class RasterSettings:
    alpha_min: float = 1.0 / 255.0
    transmittance_min: float = 1e-4
    precise: bool = False  # no footprint or transmittance cutoffs

    def effective_alpha_min(self):
        return 0.0 if self.precise else self.alpha_min


@dataclass
class ProjectedGaussians:
    """Visible subset after frustum culling, still in input storage order."""

    mean2d: torch.Tensor       # (M, 2) pixel coords
    conic: torch.Tensor        # (M, 3) upper triangle of inverse cov2d (a, b, c)
    depth: torch.Tensor        # (M,) camera z
    color: torch.Tensor        # (M, 3) in [0, 1]
    reflectance: torch.Tensor  # (M,)
    opacity: torch.Tensor      # (M,)
    radius: torch.Tensor       # (M,) footprint radius, pixels (inf in precise mode)
    index: torch.Tensor        # (M,) row in the input batch

    def __len__(self):
        return self.mean2d.shape[0]


@dataclass
class RenderedFrame:
    color: torch.Tensor         # (H, W, 3)
    depth: torch.Tensor         # (H, W)
    reflectance: torch.Tensor   # (H, W)
    opacity_mask: torch.Tensor  # (H, W)
    aux: dict = field(default_factory=dict)


def _camera_tensors(camera: CameraModel, dtype):
    r = torch.as_tensor(camera.extrinsics.rotation, dtype=dtype)
    t = torch.as_tensor(camera.extrinsics.translation, dtype=dtype)
    return r, t


def camera_center(camera: CameraModel) -> np.ndarray:
    e = camera.extrinsics
    return -e.rotation.T @ e.translation


def pixel_directions(camera: CameraModel, dtype=torch.float32) -> torch.Tensor:
    """World-frame unit view directions through every pixel, (H, W, 3)."""
    v, u = np.meshgrid(np.arange(camera.height), np.arange(camera.width),
                       indexing="ij")
    x = (u - camera.cx) / camera.fx
    y = (v - camera.cy) / camera.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    d_world = d_cam @ camera.extrinsics.rotation  # R^T applied to rows
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    return torch.as_tensor(d_world, dtype=dtype)


def project(wg: WorldGaussians, camera: CameraModel,
            settings: RasterSettings | None = None) -> ProjectedGaussians:
    """EWA-project a world-frame batch; culled rows are dropped."""
    settings = settings or RasterSettings()
    dtype = wg.means.dtype
    fx, fy, cx, cy = float(camera.fx), float(camera.fy), float(camera.cx), float(camera.cy)
    r, t = _camera_tensors(camera, dtype)
    cam = wg.means @ r.T + t
    x, y, z = cam.unbind(-1)

    keep = z > NEAR_PLANE
    zs = z.clamp_min(NEAR_PLANE)  # keeps the math finite on culled rows
    u = fx * x / zs + cx
    v = fy * y / zs + cy
    half_w = 0.5 * camera.width
    half_h = 0.5 * camera.height
    keep = keep & (abs(u - half_w) <= CULL_MARGIN * half_w)
    keep = keep & (abs(v - half_h) <= CULL_MARGIN * half_h)

    cov3d = wg.covariance()
    jw = torch.zeros(len(wg), 2, 3, dtype=dtype)
    jw[:, 0, 0] = fx / zs
    jw[:, 0, 2] = -fx * x / zs**2
    jw[:, 1, 1] = fy / zs
    jw[:, 1, 2] = -fy * y / zs**2
    jw = jw @ r
    cov2d = jw @ cov3d @ jw.transpose(-1, -2)
    a = cov2d[:, 0, 0] + COV2D_FLOOR
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + COV2D_FLOOR
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], dim=-1)

    mid = 0.5 * (a + c)
    lam_max = mid + torch.sqrt((mid * mid - det).clamp_min(0.0))
    alpha_min = settings.effective_alpha_min()
    if alpha_min > 0:
        # alpha falls below alpha_min beyond this Euclidean distance
        span = torch.log((wg.opacities / alpha_min).clamp_min(1.0))
        radius = torch.ceil(torch.sqrt(2.0 * lam_max.detach() * span.detach()))
    else:
        radius = torch.full_like(lam_max.detach(), float("inf"))

    center = torch.as_tensor(camera_center(camera), dtype=dtype)
    colors = wg.colors(wg.means - center).clamp(0.0, 1.0)

    idx = torch.nonzero(keep, as_tuple=False).squeeze(-1)
    mean2d = torch.stack([u, v], dim=-1)[idx]
    if mean2d.requires_grad:
        mean2d.retain_grad()
    return ProjectedGaussians(
        mean2d, conic[idx], z[idx], colors[idx], wg.reflectances[idx],
        wg.opacities[idx], radius[idx], idx)


def _sorted_visible(pg: ProjectedGaussians):
    order = torch.argsort(pg.depth, stable=True)
    return order


def render(wg: WorldGaussians, camera: CameraModel, sky: SkyModel,
           settings: RasterSettings | None = None) -> RenderedFrame:
    """Tiled alpha-blended render of color, depth, reflectance, opacity."""
    settings = settings or RasterSettings()
    h, w = camera.height, camera.width
    dtype = wg.means.dtype if len(wg) else sky.env_map.dtype

    dirs = pixel_directions(camera, dtype)
    sky_rgb = sky.sample(dirs.reshape(-1, 3)).reshape(h, w, 3)

    color = torch.zeros(h, w, 3, dtype=dtype)
    depth = torch.zeros(h, w, dtype=dtype)
    refl = torch.zeros(h, w, dtype=dtype)
    omask = torch.zeros(h, w, dtype=dtype)

    pg = None
    if len(wg):
        pg = project(wg, camera, settings)
    if pg is not None and len(pg):
        order = _sorted_visible(pg)
        m2d = pg.mean2d[order]
        conic = pg.conic[order]
        zs = pg.depth[order]
        cols = pg.color[order]
        refls = pg.reflectance[order]
        opac = pg.opacity[order]
        rad = pg.radius[order]

        m2d_np = m2d.detach().cpu().numpy()
        rad_np = rad.detach().cpu().numpy()
        gx0 = m2d_np[:, 0] - rad_np
        gx1 = m2d_np[:, 0] + rad_np
        gy0 = m2d_np[:, 1] - rad_np
        gy1 = m2d_np[:, 1] + rad_np

        alpha_min = settings.effective_alpha_min()
        for ty in range(0, h, TILE):
            for tx in range(0, w, TILE):
                th = min(TILE, h - ty)
                tw = min(TILE, w - tx)
                hit = np.nonzero((gx1 >= tx - 0.5) & (gx0 <= tx + tw - 0.5)
                                 & (gy1 >= ty - 0.5) & (gy0 <= ty + th - 0.5))[0]
                if hit.size == 0:
                    continue
                sel = torch.from_numpy(hit)
                py, px = torch.meshgrid(
                    torch.arange(ty, ty + th, dtype=dtype),
                    torch.arange(tx, tx + tw, dtype=dtype), indexing="ij")
                pix = torch.stack([px, py], dim=-1).reshape(-1, 1, 2)
                d = pix - m2d[sel].unsqueeze(0)
                ca, cb, cc = conic[sel].unbind(-1)
                q = 0.5 * (ca * d[..., 0] ** 2 + cc * d[..., 1] ** 2) \
                    + cb * d[..., 0] * d[..., 1]
                alpha = (opac[sel] * torch.exp(-q)).clamp(max=ALPHA_MAX)
                if alpha_min > 0:
                    alpha = alpha * (alpha.detach() >= alpha_min)
                one_minus = 1.0 - alpha
                t_incl = torch.cumprod(one_minus, dim=1)
                t_excl = torch.cat(
                    [torch.ones_like(t_incl[:, :1]), t_incl[:, :-1]], dim=1)
                weight = alpha * t_excl
                if not settings.precise:
                    # drop the term that would push transmittance under the
                    # cutoff, and everything behind it
                    weight = weight * (t_incl.detach() >= settings.transmittance_min)
                color[ty:ty + th, tx:tx + tw] += (weight @ cols[sel]).reshape(th, tw, 3)
                depth[ty:ty + th, tx:tx + tw] += (weight @ zs[sel]).reshape(th, tw)
                refl[ty:ty + th, tx:tx + tw] += (weight @ refls[sel]).reshape(th, tw)
                omask[ty:ty + th, tx:tx + tw] += weight.sum(dim=1).reshape(th, tw)

    final = color + (1.0 - omask).unsqueeze(-1) * sky_rgb
    aux = {}
    if pg is not None:
        aux = {"mean2d": pg.mean2d, "radius": pg.radius, "visible": pg.index,
               "count": len(wg)}
    return RenderedFrame(final, depth, refl, omask, aux)


# -- dense float64 reference path -------------------------------------------


def _np_quat_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _np_quat_rotate(q, v):
    w = q[0]
    u = q[1:]
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def _np_eval_sh(coeffs, d):
    out = SH_C0 * coeffs[0]
    x, y, z = d
    out = out - SH_C1 * y * coeffs[1] + SH_C1 * z * coeffs[2] - SH_C1 * x * coeffs[3]
    out = (out
           + SH_C2[0] * x * y * coeffs[4]
           + SH_C2[1] * y * z * coeffs[5]
           + SH_C2[2] * (2 * z * z - x * x - y * y) * coeffs[6]
           + SH_C2[3] * x * z * coeffs[7]
           + SH_C2[4] * (x * x - y * y) * coeffs[8])
    return out + 0.5


def _np_sky_sample(env, dirs):
    h, w = env.shape[:2]
    d = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    theta = np.arccos(np.clip(d[..., 2], -1.0, 1.0))
    phi = np.arctan2(d[..., 1], d[..., 0])
    u = (phi / (2 * np.pi) + 0.5) * w - 0.5
    v = theta / np.pi * h - 0.5
    u0 = np.floor(u)
    v0 = np.floor(v)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]
    u0 = u0.astype(int) % w
    u1 = (u0 + 1) % w
    v0 = np.clip(v0.astype(int), 0, h - 1)
    v1 = np.clip(v0 + 1, 0, h - 1)
    c = ((env[v0, u0] * (1 - fu) + env[v0, u1] * fu) * (1 - fv)
         + (env[v1, u0] * (1 - fu) + env[v1, u1] * fu) * fv)
    return np.clip(c, 0.0, 1.0)


def render_oracle(wg: WorldGaussians, camera: CameraModel,
                  sky: SkyModel) -> RenderedFrame:
    """Dense per-pixel reference: every Gaussian against every pixel, float64,
    no tiles, no footprint culling, no transmittance cutoff."""
    n = len(wg)
    if n > ORACLE_MAX_GAUSSIANS:
        raise OracleTooLarge(f"{n} Gaussians exceeds the dense-path cap")
    h, w = camera.height, camera.width
    means = wg.means.detach().cpu().numpy().astype(np.float64)
    quats = wg.quaternions.detach().cpu().numpy().astype(np.float64)
    scales = wg.scales.detach().cpu().numpy().astype(np.float64)
    opac = wg.opacities.detach().cpu().numpy().astype(np.float64)
    refl = wg.reflectances.detach().cpu().numpy().astype(np.float64)
    shs = wg.sh.detach().cpu().numpy().astype(np.float64)
    frames = None
    if wg.sh_frames is not None:
        frames = wg.sh_frames.detach().cpu().numpy().astype(np.float64)
    env = sky.env_map.detach().cpu().numpy().astype(np.float64)

    rot = camera.extrinsics.rotation
    trans = camera.extrinsics.translation
    center = camera_center(camera)

    vv, uu = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    dirs = np.stack([(uu - camera.cx) / camera.fx,
                     (vv - camera.cy) / camera.fy,
                     np.ones_like(uu)], axis=-1) @ rot
    sky_rgb = _np_sky_sample(env, dirs)

    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    reflimg = np.zeros((h, w))
    omask = np.zeros((h, w))
    transmit = np.ones((h, w))
    half_w, half_h = 0.5 * w, 0.5 * h

    visible = []
    for i in range(n):
        p = rot @ means[i] + trans
        if p[2] <= NEAR_PLANE:
            continue
        u = camera.fx * p[0] / p[2] + camera.cx
        v = camera.fy * p[1] / p[2] + camera.cy
        if abs(u - half_w) > CULL_MARGIN * half_w or abs(v - half_h) > CULL_MARGIN * half_h:
            continue
        q = quats[i] / np.linalg.norm(quats[i])
        rm = _np_quat_matrix(q) * scales[i][None, :]
        cov3d = rm @ rm.T
        jw = np.array([
            [camera.fx / p[2], 0.0, -camera.fx * p[0] / p[2] ** 2],
            [0.0, camera.fy / p[2], -camera.fy * p[1] / p[2] ** 2],
        ]) @ rot
        cov2d = jw @ cov3d @ jw.T
        ca = cov2d[0, 0] + COV2D_FLOOR
        cb = cov2d[0, 1]
        cc = cov2d[1, 1] + COV2D_FLOOR
        d = means[i] - center
        d = d / np.linalg.norm(d)
        if frames is not None:
            fq = frames[i]
            d = _np_quat_rotate(np.concatenate([fq[:1], -fq[1:]]), d)
        rgb = np.clip(_np_eval_sh(shs[i], d), 0.0, 1.0)
        visible.append((p[2], i, u, v, ca, cb, cc, rgb))

    visible.sort(key=lambda rec: (rec[0], rec[1]))
    for z, i, u, v, ca, cb, cc, rgb in visible:
        det = ca * cc - cb * cb
        ia, ib, ic = cc / det, -cb / det, ca / det
        dx = uu - u
        dy = vv - v
        power = 0.5 * (ia * dx * dx + ic * dy * dy) + ib * dx * dy
        alpha = np.minimum(opac[i] * np.exp(-power), ALPHA_MAX)
        weight = alpha * transmit
        color += weight[..., None] * rgb
        depth += weight * z
        reflimg += weight * refl[i]
        omask += weight
        transmit = transmit * (1.0 - alpha)

    color += (1.0 - omask)[..., None] * sky_rgb
    to = lambda arr: torch.from_numpy(arr)
    return RenderedFrame(to(color), to(depth), to(reflimg), to(omask), {})
