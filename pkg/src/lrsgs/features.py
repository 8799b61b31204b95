"""Edge / planar / reflectance feature extraction from calibrated sweeps.

Per-ring smoothness separates geometric edge points from planar points; a
left-vs-right ring reflectance contrast finds material edges. The labeled
high-confidence set seeds the salient primitives of the scene.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import InsufficientNeighbors
from .lidar import CalibratedSweep


class FeatureKind(IntEnum):
    NONE = 0
    GEOMETRIC_EDGE = 1
    GEOMETRIC_PLANAR = 2
    REFLECTANCE_EDGE = 3


@dataclass
class FeatureLabel:
    kind: FeatureKind
    smoothness: float
    reflectance_gradient: float


@dataclass
class FeatureConfig:
    # smoothness / reflectance thresholds and per-ring label caps
    c_edge: float = 0.1
    c_plane: float = 0.01
    g_refl: float = 0.15
    edge_cap: int = 40
    planar_cap: int = 200
    reflectance_cap: int = 40
    smoothness_k: int = 10   # even; k/2 neighbors per side
    refl_m: int = 4          # left-window size
    refl_n: int = 4          # right-window size

    def validate(self):
        if self.c_edge <= 0 or self.c_plane <= 0 or self.g_refl <= 0:
            raise ValueError("feature thresholds must be positive")
        if self.c_plane >= self.c_edge:
            raise ValueError("c_plane must be below c_edge")
        if self.smoothness_k % 2:
            raise ValueError("smoothness_k must be even")


def smoothness(point_index: int, ring_positions: np.ndarray, k: int = 10) -> float:
    """Curvature proxy: norm of the summed neighbor offsets, range-normalized.

    Needs k/2 in-ring neighbors on each side of the point.
    """
    pos = np.asarray(ring_positions, dtype=np.float64)
    half = k // 2
    if point_index - half < 0 or point_index + half >= len(pos):
        raise InsufficientNeighbors(
            f"point {point_index} lacks {half} neighbors per side on a ring of {len(pos)}")
    p = pos[point_index]
    nbrs = np.concatenate([pos[point_index - half:point_index],
                           pos[point_index + 1:point_index + half + 1]])
    return float(np.linalg.norm((nbrs - p).sum(axis=0)) / (k * np.linalg.norm(p)))


def ring_reflectance_gradient(point_index: int, ring_reflectance: np.ndarray,
                              m: int = 4, n: int = 4) -> float:
    """Absolute contrast between the left block (self included) and right block means."""
    refl = np.asarray(ring_reflectance, dtype=np.float64)
    if point_index - m < 0 or point_index + n >= len(refl):
        raise InsufficientNeighbors(
            f"point {point_index} lacks {m} left / {n} right neighbors")
    left = refl[point_index - m:point_index + 1].sum()
    right = refl[point_index + 1:point_index + n + 1].sum()
    return float(abs(left / (m + 1) - right / n))


def _ring_smoothness(pos: np.ndarray, k: int) -> np.ndarray:
    """Vectorized smoothness for one azimuth-ordered ring; NaN where undefined."""
    m = len(pos)
    half = k // 2
    out = np.full(m, np.nan)
    if m < k + 1:
        return out
    csum = np.concatenate([np.zeros((1, 3)), np.cumsum(pos, axis=0)])
    j = np.arange(half, m - half)
    window = (csum[j + half + 1] - csum[j - half]) - pos[j]  # sum of k neighbors
    diff = window - k * pos[j]
    out[j] = np.linalg.norm(diff, axis=1) / (k * np.linalg.norm(pos[j], axis=1))
    return out


def _ring_refl_gradient(refl: np.ndarray, m: int, n: int) -> np.ndarray:
    cnt = len(refl)
    out = np.full(cnt, np.nan)
    if cnt < m + n + 1:
        return out
    csum = np.concatenate([[0.0], np.cumsum(refl)])
    j = np.arange(m, cnt - n)
    left = csum[j + 1] - csum[j - m]
    right = csum[j + n + 1] - csum[j + 1]
    out[j] = np.abs(left / (m + 1) - right / n)
    return out


def classify_sweep(sweep: CalibratedSweep, config: FeatureConfig | None = None):
    """Label every point of a calibrated sweep.

    Returns (kinds uint8, smoothness, refl_gradient) aligned with the sweep;
    smoothness / gradient are NaN where a point lacks the required neighbors.
    Per ring: highest-smoothness points above c_edge become geometric edges (up
    to the cap), then the strongest remaining reflectance contrasts above g_refl
    become reflectance edges, then the smoothest remaining points below c_plane
    fill the planar cap. Ties break by azimuth index ascending.
    """
    config = config or FeatureConfig()
    config.validate()
    n = len(sweep)
    kinds = np.zeros(n, dtype=np.uint8)
    smooth = np.full(n, np.nan)
    grad = np.full(n, np.nan)

    for r in np.unique(sweep.ring):
        idx = np.flatnonzero(sweep.ring == r)
        order = idx[np.argsort(sweep.azimuth_index[idx])]
        pos = sweep.positions[order]
        refl = sweep.reflectance[order]
        az = sweep.azimuth_index[order]
        c = _ring_smoothness(pos, config.smoothness_k)
        g = _ring_refl_gradient(refl, config.refl_m, config.refl_n)
        smooth[order] = c
        grad[order] = g

        labeled = np.zeros(len(order), dtype=bool)

        cand = np.flatnonzero(~np.isnan(c) & (c >= config.c_edge))
        pick = cand[np.lexsort((az[cand], -c[cand]))][: config.edge_cap]
        kinds[order[pick]] = FeatureKind.GEOMETRIC_EDGE
        labeled[pick] = True

        cand = np.flatnonzero(~labeled & ~np.isnan(g) & (g >= config.g_refl))
        pick = cand[np.lexsort((az[cand], -g[cand]))][: config.reflectance_cap]
        kinds[order[pick]] = FeatureKind.REFLECTANCE_EDGE
        labeled[pick] = True

        cand = np.flatnonzero(~labeled & ~np.isnan(c) & (c <= config.c_plane))
        pick = cand[np.lexsort((az[cand], c[cand]))][: config.planar_cap]
        kinds[order[pick]] = FeatureKind.GEOMETRIC_PLANAR

    return kinds, smooth, grad


def label_counts(kinds: np.ndarray, rings: np.ndarray):
    """Per-ring counts of each label, for the features summary table."""
    rows = []
    for r in np.unique(rings):
        sel = kinds[rings == r]
        rows.append(
            (int(r),
             int((sel == FeatureKind.GEOMETRIC_EDGE).sum()),
             int((sel == FeatureKind.GEOMETRIC_PLANAR).sum()),
             int((sel == FeatureKind.REFLECTANCE_EDGE).sum())))
    return rows
