"""Entropy-guided point confidence.

Each fused point gets four normalized entropies (spatial, geometric, depth,
temporal) and a confidence ``C = exp(-sum(lambda_n * h_n))``. Every entropy
uses ``e * (-p ln p)``, which maps p in [0, 1] onto [0, 1] with its peak at
p = 1/e.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import DomainError, InsufficientNeighbors, NoValidDepth
from .geometry import CameraIntrinsics, Pixel, RigidTransform, project_cloud_arrays
from .preprocess import DepthMap, LabelMask, PointCloud

logger = logging.getLogger(__name__)

COV_REGULARIZATION = 1e-6
NORMALIZER_FLOOR = 1e-12
MIN_NEIGHBORS = 4
DEFAULT_KNN = 16
DEPTH_WINDOW = 3


@dataclass(frozen=True)
class WeightProfile:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 1.0

    def __post_init__(self):
        w = self.as_tuple()
        if any(x < 0 or not math.isfinite(x) for x in w):
            raise ValueError("weights must be finite and non-negative")
        if not any(x > 0 for x in w):
            raise ValueError("at least one weight must be positive")

    def as_tuple(self):
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def scaled(self, alpha: float) -> "WeightProfile":
        return WeightProfile(*(alpha * x for x in self.as_tuple()))


@dataclass(frozen=True)
class EntropyVector:
    h1: float = 0.0
    h2: float = 0.0
    h3: float = 0.0
    h4: float = 0.0

    def __post_init__(self):
        for h in self.as_tuple():
            if not 0.0 <= h <= 1.0:
                raise ValueError(f"entropy component {h} outside [0, 1]")

    def as_tuple(self):
        return (self.h1, self.h2, self.h3, self.h4)


@dataclass(frozen=True)
class ScoredPoint:
    point_index: int
    position: tuple
    pixel: Pixel
    mask_id: int
    entropies: EntropyVector
    confidence: float

    def to_dict(self) -> dict:
        return {
            "index": self.point_index,
            "position": [float(x) for x in self.position],
            "pixel": [float(self.pixel.u), float(self.pixel.v)],
            "mask_id": self.mask_id,
            "H": list(self.entropies.as_tuple()),
            "C": self.confidence,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScoredPoint":
        return cls(int(d["index"]), tuple(float(x) for x in d["position"]),
                   Pixel(float(d["pixel"][0]), float(d["pixel"][1])), int(d["mask_id"]),
                   EntropyVector(*(float(h) for h in d["H"])), float(d["C"]))


@dataclass
class PointTrack:
    """Positions of one point over consecutive frames, oldest first."""

    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(self.positions) < 1:
            raise ValueError("a track needs at least one frame")

    @property
    def frames(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class NormalizationContext:
    d_max: float = 1.0
    sigma_max: float = 1.0
    mahalanobis_max: float = 1.0


class TaskKind(enum.Enum):
    HIGH_PRECISION = "HighPrecision"
    DYNAMIC = "Dynamic"
    CLUTTERED = "Cluttered"
    BALANCED = "Balanced"


_PROFILES = {
    TaskKind.HIGH_PRECISION: WeightProfile(2.0, 2.0, 1.0, 1.0),
    TaskKind.DYNAMIC: WeightProfile(1.0, 1.0, 1.0, 2.0),
    TaskKind.CLUTTERED: WeightProfile(1.0, 1.0, 2.0, 1.0),
    TaskKind.BALANCED: WeightProfile(1.0, 1.0, 1.0, 1.0),
}


def weight_profile_for_task(kind) -> WeightProfile:
    return _PROFILES[TaskKind(kind)]


def norm_entropy(p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"probability {p} outside [0, 1]")
    if p == 0.0 or p == 1.0:
        return 0.0
    # Clamp guards against the last-ulp overshoot at p = 1/e.
    return min(1.0, -math.e * p * math.log(p))


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def spatial_entropy(pixel, centroid, scale: float = 1.0) -> float:
    """``scale`` divides the pixel distance (1 = raw pixels)."""
    d = math.hypot(pixel[0] - centroid[0], pixel[1] - centroid[1]) / scale
    return norm_entropy(1.0 / (1.0 + d))


def mahalanobis_sq(p, neighbors) -> float:
    """Squared Mahalanobis distance of ``p`` from the neighbor distribution."""
    nb = np.asarray(neighbors, dtype=float).reshape(-1, 3)
    if len(nb) < MIN_NEIGHBORS:
        raise InsufficientNeighbors(f"need >= {MIN_NEIGHBORS} neighbors, got {len(nb)}")
    mu = nb.mean(axis=0)
    cov = np.cov(nb.T, bias=True) + COV_REGULARIZATION * np.eye(3)
    diff = np.asarray(p, dtype=float) - mu
    return float(diff @ np.linalg.solve(cov, diff))


def geometric_entropy(p, neighbors, ctx: NormalizationContext, sqrt_mahalanobis: bool = False) -> float:
    dm = mahalanobis_sq(p, neighbors)
    if sqrt_mahalanobis:
        dm = math.sqrt(dm)
    return norm_entropy(_clamp01(dm / max(ctx.mahalanobis_max, NORMALIZER_FLOOR)))


def depth_entropy(local_depth_values, ctx: NormalizationContext) -> float:
    vals = np.asarray(local_depth_values, dtype=float)
    vals = vals[vals > 0]
    if len(vals) == 0:
        raise NoValidDepth("no valid depth readings in the neighborhood")
    var = float(np.var(vals))
    return norm_entropy(_clamp01(var / max(ctx.sigma_max, NORMALIZER_FLOOR)))


def temporal_entropy(track: PointTrack, ctx: NormalizationContext) -> float:
    if track.frames < 2:
        return 0.0
    steps = np.linalg.norm(np.diff(track.positions, axis=0), axis=1)
    s = float(steps.mean()) / max(ctx.d_max, NORMALIZER_FLOOR)
    return norm_entropy(s / (s + 1.0))


def confidence_score(h: EntropyVector, w: WeightProfile) -> float:
    return math.exp(-sum(lam * hn for lam, hn in zip(w.as_tuple(), h.as_tuple())))


def _round_pixel(px: float, size: int) -> int:
    # Half-up rounding, clipped so u just below width stays in range.
    return min(size - 1, max(0, int(math.floor(px + 0.5))))


def mask_centroids(mask: LabelMask) -> Dict[int, Pixel]:
    """Mean pixel (u, v) of every non-background mask id."""
    v, u = np.nonzero(mask.labels)
    ids = mask.labels[v, u]
    out = {}
    for k in np.unique(ids):
        sel = ids == k
        out[int(k)] = Pixel(float(u[sel].mean()), float(v[sel].mean()))
    return out


def mask_diagonals(mask: LabelMask) -> Dict[int, float]:
    """Bounding-box diagonal (pixels, at least 1) of every non-background mask id."""
    out = {}
    for k in mask.ids():
        v, u = np.nonzero(mask.labels == k)
        out[k] = max(1.0, math.hypot(u.max() - u.min(), v.max() - v.min()))
    return out


def _local_depths(depth: DepthMap, u: int, v: int, window: int = DEPTH_WINDOW) -> np.ndarray:
    r = window // 2
    patch = depth.depth[max(0, v - r):v + r + 1, max(0, u - r):u + r + 1]
    return patch[patch > 0]


def score_cloud(cloud: PointCloud, masks: LabelMask, depth: DepthMap,
                tracks: Optional[Mapping[int, PointTrack]], k: CameraIntrinsics,
                t: RigidTransform, w: WeightProfile, knn: int = DEFAULT_KNN,
                sqrt_mahalanobis: bool = False, normalized_spatial: bool = False) -> List[ScoredPoint]:
    """Score every point of ``cloud`` that lands inside the image.

    ``tracks`` maps cloud indices to their frame history; points without a
    track get a zero temporal entropy. Normalizers are taken per frame: the
    largest local depth variance, the largest Mahalanobis distance in the
    batch and the bounding-box diagonal of the cloud. ``normalized_spatial``
    measures the centroid distance in units of the mask's bounding-box
    diagonal instead of raw pixels.
    """
    for name, grid in (("mask", masks), ("depth map", depth)):
        if (grid.width, grid.height) != (k.width, k.height):
            raise ValueError(f"{name} is {grid.width}x{grid.height}, camera is {k.width}x{k.height}")
    if len(cloud) == 0:
        return []
    idx, uv = project_cloud_arrays(k, t, cloud.points)
    if len(idx) == 0:
        return []
    pts = cloud.points[idx]
    n = len(idx)

    centroids = mask_centroids(masks)
    scales = mask_diagonals(masks) if normalized_spatial else {}
    cols = [_round_pixel(u, k.width) for u in uv[:, 0]]
    rows = [_round_pixel(v, k.height) for v in uv[:, 1]]
    mask_ids = [int(masks.labels[r, c]) for r, c in zip(rows, cols)]

    # Geometric: k nearest in-frame neighbors, excluding the point itself.
    n_nb = min(knn, n - 1)
    dms = np.zeros(n)
    has_geom = np.zeros(n, dtype=bool)
    if n_nb >= MIN_NEIGHBORS:
        tree = cKDTree(pts)
        _, nb_idx = tree.query(pts, k=n_nb + 1)
        for i in range(n):
            nb = [j for j in nb_idx[i] if j != i][:n_nb]
            dms[i] = mahalanobis_sq(pts[i], pts[nb])
            has_geom[i] = True
    if sqrt_mahalanobis:
        dms = np.sqrt(dms)

    local = [_local_depths(depth, c, r) for r, c in zip(rows, cols)]
    variances = np.array([np.var(vals) if len(vals) else 0.0 for vals in local])

    diag = float(np.linalg.norm(cloud.points.max(axis=0) - cloud.points.min(axis=0)))
    ctx = NormalizationContext(
        d_max=max(diag, NORMALIZER_FLOOR),
        sigma_max=max(float(variances.max()), NORMALIZER_FLOOR),
        mahalanobis_max=max(float(dms.max()), NORMALIZER_FLOOR),
    )

    scored = []
    for i in range(n):
        pixel = Pixel(float(uv[i, 0]), float(uv[i, 1]))
        mid = mask_ids[i]
        h1 = spatial_entropy(pixel, centroids[mid], scales.get(mid, 1.0)) if mid in centroids else 0.0
        h2 = norm_entropy(_clamp01(dms[i] / ctx.mahalanobis_max)) if has_geom[i] else 0.0
        h3 = depth_entropy(local[i], ctx) if len(local[i]) else 0.0
        track = tracks.get(int(idx[i])) if tracks else None
        h4 = temporal_entropy(track, ctx) if track is not None else 0.0
        ent = EntropyVector(h1, h2, h3, h4)
        scored.append(ScoredPoint(int(idx[i]), tuple(float(x) for x in pts[i]), pixel, mid,
                                  ent, confidence_score(ent, w)))
    return scored
