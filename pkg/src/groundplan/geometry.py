"""Rigid LiDAR->camera transforms and pinhole projection.

Conventions: camera frame is x right, y down, z forward along the optical
axis. Pixel origin is the top-left corner, ``u`` grows right, ``v`` down.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, NamedTuple, Sequence, Tuple

import numpy as np

from .errors import FormatError, InvalidTransform, NonPositiveDepth

ORTHONORMAL_TOL = 1e-6


class Pixel(NamedTuple):
    u: float
    v: float


def as_vec3(p) -> np.ndarray:
    v = np.asarray(p, dtype=float).reshape(3)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite point {p!r}")
    return v


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def contains(self, px: Pixel) -> bool:
        return 0 <= px.u < self.width and 0 <= px.v < self.height

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion ``p -> R p + t`` held as a 4x4 homogeneous matrix."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (4, 4):
            raise InvalidTransform(f"expected 4x4 matrix, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise InvalidTransform("transform contains non-finite entries")
        if not np.allclose(m[3], [0, 0, 0, 1], atol=ORTHONORMAL_TOL):
            raise InvalidTransform("bottom row must be [0, 0, 0, 1]")
        r = m[:3, :3]
        if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHONORMAL_TOL:
            raise InvalidTransform("rotation block is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise InvalidTransform("rotation block must have determinant +1")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(4))

    @classmethod
    def from_rt(cls, rotation, translation) -> "RigidTransform":
        m = np.eye(4)
        m[:3, :3] = np.asarray(rotation, dtype=float)
        m[:3, 3] = as_vec3(translation)
        return cls(m)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def to_list(self) -> List[List[float]]:
        """Row-major nested list, the on-disk representation."""
        return [[float(x) for x in row] for row in self.matrix]

    def __eq__(self, other) -> bool:
        return isinstance(other, RigidTransform) and np.array_equal(self.matrix, other.matrix)

    def __hash__(self):
        return hash(self.matrix.tobytes())


def transform_point(t: RigidTransform, p) -> np.ndarray:
    return t.rotation @ as_vec3(p) + t.translation


def transform_points(t: RigidTransform, points) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    return pts @ t.rotation.T + t.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying ``b`` first, then ``a``."""
    return RigidTransform(a.matrix @ b.matrix)


def invert(t: RigidTransform) -> RigidTransform:
    r_inv = t.rotation.T
    m = np.eye(4)
    m[:3, :3] = r_inv
    m[:3, 3] = -r_inv @ t.translation
    # Re-orthonormalize to keep repeated inversions from drifting past the check.
    u, _, vt = np.linalg.svd(m[:3, :3])
    m[:3, :3] = u @ vt
    return RigidTransform(m)


def project_point(k: CameraIntrinsics, p_cam) -> Pixel:
    x, y, z = as_vec3(p_cam)
    if z <= 0:
        raise NonPositiveDepth(f"point has camera depth {z} <= 0")
    return Pixel(k.fx * x / z + k.cx, k.fy * y / z + k.cy)


def project_cloud(k: CameraIntrinsics, t: RigidTransform,
                  cloud: Iterable) -> List[Tuple[int, Pixel]]:
    """Project LiDAR points to pixels, dropping points behind the camera or off-image.

    Returned pairs keep the input order and carry the original point index.
    """
    pts = np.asarray(list(cloud) if not isinstance(cloud, np.ndarray) else cloud,
                     dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        return []
    idx, uv = project_cloud_arrays(k, t, pts)
    return [(int(i), Pixel(float(u), float(v))) for i, (u, v) in zip(idx, uv)]


def project_cloud_arrays(k: CameraIntrinsics, t: RigidTransform,
                         pts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized core of :func:`project_cloud`: ``(indices, (n, 2) pixel array)``."""
    cam = transform_points(t, pts)
    z = cam[:, 2]
    front = z > 0
    uv = np.full((len(cam), 2), np.nan)
    uv[front, 0] = k.fx * cam[front, 0] / z[front] + k.cx
    uv[front, 1] = k.fy * cam[front, 1] / z[front] + k.cy
    inside = front & (uv[:, 0] >= 0) & (uv[:, 0] < k.width) & (uv[:, 1] >= 0) & (uv[:, 1] < k.height)
    idx = np.flatnonzero(inside)
    return idx, uv[idx]


def rotation_about_axis(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit ``axis`` and ``angle`` in radians."""
    a = as_vec3(axis)
    a = a / np.linalg.norm(a)
    kx = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * (kx @ kx)


def load_calibration(path) -> Tuple[CameraIntrinsics, RigidTransform]:
    try:
        data = json.loads(Path(path).read_text())
        k = CameraIntrinsics.from_dict(data["intrinsics"])
        t = RigidTransform(np.array(data["T_lidar_camera"], dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid calibration file: {exc}") from exc
    return k, t


def save_calibration(path, k: CameraIntrinsics, t: RigidTransform) -> None:
    Path(path).write_text(json.dumps({"intrinsics": k.to_dict(), "T_lidar_camera": t.to_list()}, indent=2))
