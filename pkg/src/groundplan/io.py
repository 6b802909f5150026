"""Readers and writers for point clouds, depth maps, label masks and images.

Depth maps are 16-bit binary PGM in millimeters (0 = invalid), masks are
8-bit PGM holding mask ids, images are binary PPM. Netpbm handling is
delegated to Pillow.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError
from .preprocess import DepthMap, LabelMask, PointCloud

CLOUD_MAGIC = b"PC3D"


def read_cloud(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if raw[:4] == CLOUD_MAGIC:
        if len(raw) < 8:
            raise FormatError(f"{path}: truncated binary cloud header")
        (count,) = struct.unpack("<I", raw[4:8])
        body = raw[8:]
        if len(body) != count * 12:
            raise FormatError(f"{path}: expected {count} points, got {len(body)} bytes")
        pts = np.frombuffer(body, dtype="<f4").reshape(count, 3).astype(float)
        return PointCloud(pts)
    rows = []
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 'x y z', got {line!r}")
        try:
            rows.append([float(x) for x in parts])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    return PointCloud(np.array(rows, dtype=float).reshape(-1, 3))


def write_cloud(path, cloud: PointCloud, binary: bool = False) -> None:
    pts = np.asarray(cloud.points, dtype=float).reshape(-1, 3)
    if binary:
        Path(path).write_bytes(CLOUD_MAGIC + struct.pack("<I", len(pts)) + pts.astype("<f4").tobytes())
        return
    lines = ["# x y z"] + [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in pts]
    Path(path).write_text("\n".join(lines) + "\n")


def _open(path, kind: str) -> Image.Image:
    try:
        return Image.open(path)
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: cannot read {kind}: {exc}") from exc


def read_depth(path) -> DepthMap:
    img = _open(path, "depth map")
    if img.format != "PPM" or img.mode not in ("I", "I;16", "I;16B"):
        raise FormatError(f"{path}: depth map must be a 16-bit binary PGM")
    mm = np.asarray(img, dtype=np.int64)
    return DepthMap(mm.astype(float) / 1000.0)


def write_depth(path, depth: DepthMap) -> None:
    mm = np.rint(np.asarray(depth.depth) * 1000.0)
    if mm.max(initial=0) > 65535:
        raise FormatError("depth exceeds the 65.535 m range of 16-bit millimeters")
    Image.fromarray(mm.astype(np.uint16)).save(path, format="PPM")


def read_mask(path) -> LabelMask:
    img = _open(path, "mask")
    if img.format != "PPM" or img.mode != "L":
        raise FormatError(f"{path}: mask must be an 8-bit binary PGM")
    return LabelMask(np.asarray(img, dtype=np.int64))


def write_mask(path, mask: LabelMask) -> None:
    labels = np.asarray(mask.labels)
    if labels.max(initial=0) > 255:
        raise FormatError("mask ids above 255 do not fit an 8-bit PGM")
    Image.fromarray(labels.astype(np.uint8)).save(path, format="PPM")


def read_image(path) -> np.ndarray:
    img = _open(path, "image")
    if img.format != "PPM" or img.mode != "RGB":
        raise FormatError(f"{path}: image must be a binary PPM (P6)")
    return np.array(img, dtype=np.uint8)


def write_image(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PPM")
