"""Shared generators for synthetic mini-scenes used across test modules."""

from __future__ import annotations

import numpy as np

from lrsgs.geometry import RigidTransform, inverse_sigmoid, rgb_to_sh_dc
from lrsgs.lidar import CameraModel, LidarSweep


def make_camera(f=50.0, c=32.0, size=64, extrinsics=None):
    k = np.array([[f, 0, c], [0, f, c], [0, 0, 1.0]])
    return CameraModel(k, extrinsics or RigidTransform.identity(), size, size)


def random_collection(n, seed=0, dtype=None, spread=2.0, z_range=(2.0, 7.0),
                      max_scale=0.5):
    """Random mixed-kind Gaussians inside the default camera frustum."""
    import torch
    from lrsgs.scene import SH_COEFFS, GaussianCollection

    rng = np.random.default_rng(seed)
    means = np.column_stack([
        rng.uniform(-spread, spread, n),
        rng.uniform(-spread, spread, n),
        rng.uniform(*z_range, n),
    ])
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    logs = np.log(rng.uniform(0.02, max_scale, size=(n, 3)))
    kinds = rng.integers(0, 3, n).astype(np.uint8)
    opac = inverse_sigmoid(rng.uniform(0.05, 0.95, n))
    refl = inverse_sigmoid(rng.uniform(0.05, 0.95, n))
    sh = rng.uniform(-0.05, 0.05, size=(n, SH_COEFFS, 3))
    sh[:, 0] = rgb_to_sh_dc(rng.uniform(0.1, 0.9, size=(n, 3)))
    return GaussianCollection(means, quats, logs, opac, refl, sh, kinds,
                              dtype=dtype or torch.float32)


def random_sky(seed=0, dtype=None):
    import torch
    from lrsgs.scene import SKY_SHAPE, SkyModel

    rng = np.random.default_rng(seed + 1000)
    env = rng.uniform(0.0, 1.0, size=(*SKY_SHAPE, 3))
    return SkyModel(torch.as_tensor(env, dtype=dtype or torch.float32))


def plane_sweep(rho=0.5, z_plane=2.0, n_rings=4, n_az=64, elev_range=(0.6, 1.0),
                rho_fn=None):
    """Sweep of a horizontal plane z=z_plane with forward-model intensities.

    Beams leave the origin on an elevation/azimuth grid; intensity is
    rho * cos(alpha) / R^2 so calibration recovers rho exactly.
    rho_fn(azimuth_rad) overrides the constant rho when given.
    """
    positions, intensity, ring, azidx = [], [], [], []
    elevations = np.linspace(elev_range[0], elev_range[1], n_rings)
    normal = np.array([0.0, 0.0, -1.0])  # plane normal facing the sensor below
    for r, e in enumerate(elevations):
        for a_i, a in enumerate(np.linspace(0, 2 * np.pi, n_az, endpoint=False)):
            d = np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])
            rng = z_plane / d[2]
            p = d * rng
            cos_a = abs(np.dot(d, normal))
            rho_here = rho_fn(a) if rho_fn is not None else rho
            positions.append(p)
            intensity.append(rho_here * cos_a / rng**2)
            ring.append(r)
            azidx.append(a_i)
    return LidarSweep(np.array(positions), np.array(intensity),
                      np.array(ring), np.array(azidx))


def corner_rings(n_rings=4, n_az=181, apex_y=2.0, refl_fn=None):
    """Rings scanning two vertical walls meeting in a corner line at (0, apex_y).

    Walls: y = apex_y - |x| (45-degree corner opening toward the sensor at the
    origin). Returns (positions, reflectance, ring, azimuth) arrays ordered ring
    by ring; the corner is at azimuth pi/2 exactly.
    """
    positions, refl, ring, azidx = [], [], [], []
    azimuths = np.linspace(np.pi / 4 + 0.1, 3 * np.pi / 4 - 0.1, n_az)
    for r in range(n_rings):
        z = 0.2 * r
        for a_i, a in enumerate(azimuths):
            c, s = np.cos(a), np.sin(a)
            # ray (c, s) vs line y = apex_y - |x|: t*s = apex_y - |t*c|
            t = apex_y / (s + abs(c))
            p = np.array([t * c, t * s, z])
            positions.append(p)
            refl.append(refl_fn(a) if refl_fn is not None else 0.5)
            ring.append(r)
            azidx.append(a_i)
    return (np.array(positions), np.array(refl),
            np.array(ring, dtype=np.int64), np.array(azidx, dtype=np.int64))
