"""Point-cloud, depth-map and mask conditioning ahead of confidence scoring."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidCrop
from .geometry import CameraIntrinsics, RigidTransform, project_cloud_arrays, transform_points

logger = logging.getLogger(__name__)

DEFAULT_ANGLE_TOL = 15.0
DEFAULT_INLIER_DIST = 0.02
DEFAULT_VOXEL = 0.01
DEFAULT_MEDIAN_WINDOW = 3
# Camera frame has y pointing down, so "up" is -y.
DEFAULT_UP = (0.0, -1.0, 0.0)


@dataclass
class PointCloud:
    points: np.ndarray
    timestamps: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.timestamps is not None:
            self.timestamps = np.asarray(self.timestamps, dtype=float)
            if len(self.timestamps) != len(self.points):
                raise ValueError("timestamps must match points one-to-one")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class DepthMap:
    """Row-major depth image in meters; 0 marks an invalid reading."""

    depth: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        if self.depth.ndim != 2:
            raise ValueError("depth map must be 2-D")
        if np.any(self.depth < 0) or not np.all(np.isfinite(self.depth)):
            raise ValueError("depth values must be finite and >= 0")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


@dataclass
class LabelMask:
    """Per-pixel mask ids, 0 = background."""

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2:
            raise ValueError("label mask must be 2-D")
        if np.any(self.labels < 0):
            raise ValueError("mask ids must be non-negative")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def ids(self) -> List[int]:
        return [int(i) for i in np.unique(self.labels) if i != 0]


@dataclass
class ConeCell:
    az_bin: int
    el_bin: int
    indices: List[int] = field(default_factory=list)


def _angular_bins(k: CameraIntrinsics, cam: np.ndarray, n_az: int, n_el: int):
    az_lo, az_hi = math.atan(-k.cx / k.fx), math.atan((k.width - k.cx) / k.fx)
    el_lo, el_hi = math.atan(-k.cy / k.fy), math.atan((k.height - k.cy) / k.fy)
    az = np.arctan2(cam[:, 0], cam[:, 2])
    el = np.arctan2(cam[:, 1], cam[:, 2])
    ai = np.floor((az - az_lo) / (az_hi - az_lo) * n_az).astype(int)
    ei = np.floor((el - el_lo) / (el_hi - el_lo) * n_el).astype(int)
    return np.clip(ai, 0, n_az - 1), np.clip(ei, 0, n_el - 1)


def cone_cell_partition(cloud: PointCloud, k: CameraIntrinsics, t: RigidTransform,
                        n_az: int, n_el: int) -> List[ConeCell]:
    """Bin the in-frustum points into an ``n_az`` x ``n_el`` grid of equal view angles.

    Only non-empty cells are returned, ordered by (azimuth, elevation) bin.
    """
    if n_az < 1 or n_el < 1:
        raise ValueError("cell grid must be at least 1x1")
    if len(cloud) == 0:
        return []
    idx, _ = project_cloud_arrays(k, t, cloud.points)
    if len(idx) == 0:
        return []
    cam = transform_points(t, cloud.points[idx])
    ai, ei = _angular_bins(k, cam, n_az, n_el)
    cells = {}
    for point_index, a, e in zip(idx, ai, ei):
        cells.setdefault((int(a), int(e)), []).append(int(point_index))
    return [ConeCell(a, e, members) for (a, e), members in sorted(cells.items())]


def fit_plane_pca(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Least-squares plane through ``points``: returns (centroid, unit normal)."""
    c = points.mean(axis=0)
    cov = np.cov((points - c).T, bias=True)
    _, vecs = np.linalg.eigh(cov)
    return c, vecs[:, 0]


def remove_ground(cell_points, angle_tol: float = DEFAULT_ANGLE_TOL,
                  inlier_dist: float = DEFAULT_INLIER_DIST,
                  up: Sequence[float] = DEFAULT_UP, seed_margin: float = 0.05,
                  lowest_fraction: float = 0.1, iterations: int = 3) -> Tuple[List[int], List[int]]:
    """Split one cell into (ground, kept) index lists.

    The plane is seeded from the lowest points along ``up``, fitted with PCA
    and refined on its own inliers; it only counts as ground when its normal
    is within ``angle_tol`` degrees of the gravity axis.
    """
    pts = np.asarray(cell_points, dtype=float).reshape(-1, 3)
    n = len(pts)
    everything = list(range(n))
    if n < 3:
        return [], everything
    up_v = np.asarray(up, dtype=float)
    up_v = up_v / np.linalg.norm(up_v)

    heights = pts @ up_v
    order = np.argsort(heights, kind="stable")
    n_lowest = max(3, int(math.ceil(lowest_fraction * n)))
    lowest_mean = heights[order[:n_lowest]].mean()
    seeds = heights < lowest_mean + seed_margin
    if seeds.sum() < 3:
        seeds = np.zeros(n, dtype=bool)
        seeds[order[:3]] = True

    inliers = seeds
    for _ in range(iterations):
        centroid, normal = fit_plane_pca(pts[inliers])
        dist = np.abs((pts - centroid) @ normal)
        refined = dist < inlier_dist
        if refined.sum() < 3 or np.array_equal(refined, inliers):
            break
        inliers = refined

    centroid, normal = fit_plane_pca(pts[inliers])
    tilt = math.degrees(math.acos(min(1.0, abs(float(normal @ up_v)))))
    if tilt > angle_tol:
        return [], everything
    ground = np.abs((pts - centroid) @ normal) < inlier_dist
    return [int(i) for i in np.flatnonzero(ground)], [int(i) for i in np.flatnonzero(~ground)]


def remove_ground_cells(cloud: PointCloud, cells: List[ConeCell], **kwargs) -> List[int]:
    """Run :func:`remove_ground` per cone cell; returns kept cloud indices in input order."""
    kept = []
    for cell in cells:
        members = np.asarray(cell.indices)
        _, keep = remove_ground(cloud.points[members], **kwargs)
        kept.extend(int(members[i]) for i in keep)
    return sorted(kept)


def downsample(cloud: PointCloud, voxel: float = DEFAULT_VOXEL) -> PointCloud:
    """Voxel-grid downsampling: one centroid per occupied voxel, ordered by first member."""
    if voxel <= 0:
        raise ValueError("voxel size must be positive")
    pts = cloud.points
    if len(pts) == 0:
        return PointCloud(np.empty((0, 3)))
    keys = np.floor(pts / voxel).astype(np.int64)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(first), 3))
    np.add.at(sums, inverse, pts)
    counts = np.bincount(inverse, minlength=len(first))[:, None]
    centroids = sums / counts
    order = np.argsort(first, kind="stable")
    return PointCloud(centroids[order])


def filter_depth(d: DepthMap, window: int = DEFAULT_MEDIAN_WINDOW,
                 crop: Optional[Tuple[int, int, int, int]] = None) -> DepthMap:
    """Median filter over valid neighbors, then crop to ``(x, y, width, height)``."""
    if window not in (1, 3, 5, 7):
        raise ValueError("median window must be one of 1, 3, 5, 7")
    if crop is None:
        crop = (0, 0, d.width, d.height)
    x0, y0, w, h = crop
    if x0 < 0 or y0 < 0 or w <= 0 or h <= 0 or x0 + w > d.width or y0 + h > d.height:
        raise InvalidCrop(f"crop {crop} exceeds a {d.width}x{d.height} depth map")

    if window == 1:
        filtered = d.depth.copy()
    else:
        r = window // 2
        vals = np.where(d.depth > 0, d.depth, np.nan)
        padded = np.pad(vals, r, mode="constant", constant_values=np.nan)
        windows = sliding_window_view(padded, (window, window))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            med = np.nanmedian(windows, axis=(-2, -1))
        filtered = np.nan_to_num(med, nan=0.0)
    return DepthMap(filtered[y0:y0 + h, x0:x0 + w])


def depth_to_cloud(d: DepthMap, k: CameraIntrinsics) -> PointCloud:
    """Back-project every valid pixel into the camera frame, row-major order."""
    if (d.width, d.height) != (k.width, k.height):
        raise ValueError("depth map size does not match the camera intrinsics")
    v, u = np.nonzero(d.depth > 0)
    z = d.depth[v, u]
    x = (u - k.cx) * z / k.fx
    y = (v - k.cy) * z / k.fy
    return PointCloud(np.column_stack([x, y, z]))
