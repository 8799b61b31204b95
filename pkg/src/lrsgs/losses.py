"""Training losses and evaluation metrics.

Three loss families compose the total: photometric (L1 + D-SSIM), projected
LiDAR supervision (masked depth / reflectance / reflectance-gradient L1), and
the cross-modal coupling between rendered reflectance and rendered grayscale
(gradient direction agreement + relative-gradient value agreement). All are
plain functions of torch tensors so the same code path serves float32
training and float64 gradient verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as tfunc

from .errors import DimensionMismatch
from .lidar import (
    CameraModel,
    CalibratedSweep,
    SparseImage,
    gradient_neighbors,
    pixel_reflectance_gradient,
    project_to_camera,
)

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11x11 window
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SMOOTH_SIGMA = 1.2
GRAY_WEIGHTS = (0.299, 0.587, 0.114)  # ITU-R 601
DIR_MAG_CUTOFF = 1e-4
VAL_EPS = 1e-3
PSNR_CAP = 99.0

# Scharr, 1/32 normalization: unit response on a unit-slope ramp
SCHARR_X = np.array([[-3.0, 0.0, 3.0], [-10.0, 0.0, 10.0], [-3.0, 0.0, 3.0]]) / 32.0


@dataclass
class LossWeights:
    color: float = 0.2       # D-SSIM share inside the photometric term
    depth: float = 0.1
    fle: float = 0.1
    fle_grad: float = 0.05
    direction: float = 0.1
    value: float = 0.2


@dataclass
class LossReport:
    rgb: torch.Tensor
    depth: torch.Tensor
    fle: torch.Tensor
    fle_grad: torch.Tensor
    direction: torch.Tensor
    value: torch.Tensor
    total: torch.Tensor
    flags: dict = field(default_factory=dict)
    grad_norms: dict = field(default_factory=dict)

    def to_dict(self):
        out = {k: float(getattr(self, k).detach())
               for k in ("rgb", "depth", "fle", "fle_grad", "direction",
                         "value", "total")}
        out.update(self.flags)
        return out


def _check_same_shape(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise DimensionMismatch(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def _gaussian_kernel1d(sigma, radius, dtype):
    x = torch.arange(-radius, radius + 1, dtype=dtype)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM over channels, 11x11 Gaussian window, range-1 constants.

    Windows fully inside the image only (border cropped), population
    statistics. Accepts (H, W, C) or (H, W).
    """
    _check_same_shape(a, b, "ssim inputs")
    if a.ndim == 2:
        a = a.unsqueeze(-1)
        b = b.unsqueeze(-1)
    dtype = a.dtype
    k1 = _gaussian_kernel1d(SSIM_SIGMA, SSIM_RADIUS, dtype)
    kernel = (k1[:, None] * k1[None, :]).reshape(1, 1, 2 * SSIM_RADIUS + 1, -1)
    x = a.permute(2, 0, 1).unsqueeze(1)
    y = b.permute(2, 0, 1).unsqueeze(1)

    def win(img):
        return tfunc.conv2d(img, kernel)

    mu_x = win(x)
    mu_y = win(y)
    var_x = win(x * x) - mu_x * mu_x
    var_y = win(y * y) - mu_y * mu_y
    cov = win(x * y) - mu_x * mu_y
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    s = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) \
        / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2))
    return s.mean()


def color_loss(rendered: torch.Tensor, gt: torch.Tensor, lambda_c: float):
    """(1-lambda_c) L1 + lambda_c (1-SSIM)/2 on (H, W, 3) images in [0,1]."""
    _check_same_shape(rendered, gt, "color images")
    l1 = (rendered - gt).abs().mean()
    if lambda_c == 0:
        return l1, {"l1": l1, "dssim": torch.zeros_like(l1)}
    dssim = (1.0 - ssim(rendered, gt)) / 2.0
    return (1.0 - lambda_c) * l1 + lambda_c * dssim, {"l1": l1, "dssim": dssim}


class LidarTargets:
    """Per-camera projected LiDAR supervision: sparse depth, reflectance,
    reflectance-gradient images plus the shared gradient stencil."""

    def __init__(self, depth: SparseImage, reflectance: SparseImage,
                 refl_grad: SparseImage, dj: np.ndarray, dk: np.ndarray):
        self.depth = depth
        self.reflectance = reflectance
        self.refl_grad = refl_grad
        self.dj = dj
        self.dk = dk

    @classmethod
    def from_sweep(cls, sweep: CalibratedSweep, camera: CameraModel) -> "LidarTargets":
        refl, depth = project_to_camera(sweep, camera)
        h, w = refl.valid_mask.shape
        # pixel-center unprojection, matching the rendered-side stencil exactly
        vv, uu = np.mgrid[0:h, 0:w]
        pts = camera.unproject(uu, vv, depth.values)
        grad = pixel_reflectance_gradient(refl, pts)
        dj, dk = gradient_neighbors(refl.valid_mask)
        return cls(depth, refl, grad, dj, dk)


def rendered_refl_gradient(refl_img: torch.Tensor, depth_img: torch.Tensor,
                           targets: LidarTargets, camera: CameraModel) -> torch.Tensor:
    """Distance-normalized gradient of rendered reflectance over the ground
    truth stencil, with 3D distances taken from depth-unprojected points."""
    h, w = targets.dj.shape
    _check_same_shape(refl_img, torch.empty(h, w), "rendered reflectance")
    dtype = refl_img.dtype
    vv, uu = np.mgrid[0:h, 0:w]
    x = torch.as_tensor((uu - camera.cx) / camera.fx, dtype=dtype)
    y = torch.as_tensor((vv - camera.cy) / camera.fy, dtype=dtype)
    pts = torch.stack([x * depth_img, y * depth_img, depth_img], dim=-1)

    def term(du, dv):
        has = torch.as_tensor((du != 0) | (dv != 0))
        ju = torch.as_tensor(np.clip(uu + du, 0, w - 1))
        jv = torch.as_tensor(np.clip(vv + dv, 0, h - 1))
        diff = refl_img - refl_img[jv, ju]
        delta = pts - pts[jv, ju]
        dist = torch.sqrt((delta * delta).sum(-1).clamp_min(1e-24))
        return torch.where(has, diff / dist, torch.zeros_like(diff))

    zeros = np.zeros_like(targets.dj)
    tx = term(targets.dj, zeros)
    ty = term(zeros, targets.dk)
    return torch.sqrt((tx * tx + ty * ty).clamp_min(1e-24))


def _masked_l1(pred: torch.Tensor, target_vals: np.ndarray, mask: np.ndarray):
    m = torch.as_tensor(mask)
    if not m.any():
        return None
    t = torch.as_tensor(target_vals, dtype=pred.dtype)
    return (pred[m] - t[m]).abs().mean()


def lidar_loss(rendered_depth: torch.Tensor, rendered_refl: torch.Tensor,
               targets: LidarTargets, camera: CameraModel,
               weights: LossWeights | None = None):
    """Masked L1 on depth, reflectance, and the reflectance gradient."""
    weights = weights or LossWeights()
    _check_same_shape(rendered_depth, rendered_refl, "depth vs reflectance")
    if tuple(rendered_depth.shape) != targets.depth.valid_mask.shape:
        raise DimensionMismatch(
            f"rendered {tuple(rendered_depth.shape)} vs "
            f"targets {targets.depth.valid_mask.shape}")
    zero = rendered_depth.new_zeros(())
    d_term = _masked_l1(rendered_depth, targets.depth.values,
                        targets.depth.valid_mask)
    f_term = _masked_l1(rendered_refl, targets.reflectance.values,
                        targets.reflectance.valid_mask)
    if targets.refl_grad.valid_mask.any():
        g = rendered_refl_gradient(rendered_refl, rendered_depth, targets, camera)
        g_term = _masked_l1(g, targets.refl_grad.values, targets.refl_grad.valid_mask)
    else:
        g_term = None
    empty = d_term is None and f_term is None and g_term is None
    d_term = zero if d_term is None else d_term
    f_term = zero if f_term is None else f_term
    g_term = zero if g_term is None else g_term
    total = weights.depth * d_term + weights.fle * f_term + weights.fle_grad * g_term
    parts = {"depth": d_term, "fle": f_term, "fle_grad": g_term,
             "empty_lidar_mask": empty}
    return total, parts


def _smooth(img: torch.Tensor, sigma: float) -> torch.Tensor:
    radius = math.ceil(3 * sigma)
    k1 = _gaussian_kernel1d(sigma, radius, img.dtype)
    kernel = (k1[:, None] * k1[None, :]).reshape(1, 1, 2 * radius + 1, -1)
    x = img.unsqueeze(0).unsqueeze(0)
    x = tfunc.pad(x, (radius,) * 4, mode="reflect")
    return tfunc.conv2d(x, kernel)[0, 0]


def _scharr(img: torch.Tensor):
    kx = torch.as_tensor(SCHARR_X, dtype=img.dtype).reshape(1, 1, 3, 3)
    ky = kx.transpose(-1, -2)
    x = img.unsqueeze(0).unsqueeze(0)
    x = tfunc.pad(x, (1, 1, 1, 1), mode="reflect")
    gx = tfunc.conv2d(x, kx)[0, 0]
    gy = tfunc.conv2d(x, ky)[0, 0]
    return gx, gy


def joint_loss(rendered_rgb: torch.Tensor, rendered_refl: torch.Tensor,
               weights: LossWeights | None = None):
    """Cross-modal coupling between reflectance and image gradients.

    Direction: cosine agreement of normalized gradient fields, skipping
    pixels where either magnitude is negligible. Value: L1 between relative
    gradients g/(I+eps) of the two smoothed channels.
    """
    weights = weights or LossWeights()
    if rendered_rgb.ndim != 3 or rendered_rgb.shape[-1] != 3:
        raise DimensionMismatch(f"rgb must be (H, W, 3), got {tuple(rendered_rgb.shape)}")
    _check_same_shape(rendered_rgb[..., 0], rendered_refl, "rgb vs reflectance")
    r, g, b = rendered_rgb.unbind(-1)
    gray = GRAY_WEIGHTS[0] * r + GRAY_WEIGHTS[1] * g + GRAY_WEIGHTS[2] * b

    f_s = _smooth(rendered_refl, SMOOTH_SIGMA)
    c_s = _smooth(gray, SMOOTH_SIGMA)
    fx, fy = _scharr(f_s)
    cx, cy = _scharr(c_s)
    f_mag = torch.sqrt((fx * fx + fy * fy).clamp_min(1e-24))
    c_mag = torch.sqrt((cx * cx + cy * cy).clamp_min(1e-24))

    keep = ((f_mag >= DIR_MAG_CUTOFF) & (c_mag >= DIR_MAG_CUTOFF)).detach()
    if keep.any():
        cos = (fx * cx + fy * cy) / (f_mag * c_mag)
        l_dir = (1.0 - cos[keep]).mean()
    else:
        l_dir = rendered_refl.new_zeros(())

    rel_f = f_mag / (f_s + VAL_EPS)
    rel_c = c_mag / (c_s + VAL_EPS)
    l_val = (rel_f - rel_c).abs().mean()

    total = weights.direction * l_dir + weights.value * l_val
    return total, {"direction": l_dir, "value": l_val}


def total_loss(frame, gt_rgb: torch.Tensor, targets: LidarTargets | None,
               camera: CameraModel, weights: LossWeights | None = None,
               enable_lidar=True, enable_joint=True) -> LossReport:
    """Compose the full objective from a rendered frame and its supervision."""
    weights = weights or LossWeights()
    rgb_term, _ = color_loss(frame.color, gt_rgb, weights.color)
    zero = rgb_term.new_zeros(())
    d = f = fg = zero
    flags = {}
    if enable_lidar and targets is not None:
        _, parts = lidar_loss(frame.depth, frame.reflectance, targets, camera,
                              weights)
        d, f, fg = parts["depth"], parts["fle"], parts["fle_grad"]
        if parts["empty_lidar_mask"]:
            flags["empty_lidar_mask"] = True
    ldir = lval = zero
    if enable_joint:
        _, jparts = joint_loss(frame.color, frame.reflectance, weights)
        ldir, lval = jparts["direction"], jparts["value"]
    total = (rgb_term + weights.depth * d + weights.fle * f
             + weights.fle_grad * fg + weights.direction * ldir
             + weights.value * lval)
    return LossReport(rgb_term, d, f, fg, ldir, lval, total, flags)


def psnr(rendered: torch.Tensor, gt: torch.Tensor) -> float:
    _check_same_shape(rendered, gt, "psnr images")
    mse = float(((rendered - gt) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return -10.0 * math.log10(mse)


def metrics(rendered_rgb: torch.Tensor, gt_rgb: torch.Tensor,
            rendered_refl: torch.Tensor | None = None,
            refl_gt: SparseImage | None = None) -> dict:
    """PSNR / SSIM on color plus masked reflectance RMSE when provided."""
    out = {
        "psnr": psnr(rendered_rgb, gt_rgb),
        "ssim": float(ssim(rendered_rgb, gt_rgb)),
    }
    if rendered_refl is not None and refl_gt is not None:
        m = refl_gt.valid_mask
        if m.any():
            diff = rendered_refl.detach().cpu().numpy()[m] - refl_gt.values[m]
            out["refl_rmse"] = float(np.sqrt(np.mean(diff ** 2)))
        else:
            out["refl_rmse"] = float("nan")
    return out
