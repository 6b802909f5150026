import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundplan.errors import InvalidCrop
from groundplan.geometry import RigidTransform, project_point
from groundplan.preprocess import (DepthMap, PointCloud, cone_cell_partition, depth_to_cloud, downsample,
                                   filter_depth, remove_ground, remove_ground_cells)


def plane_and_cube(seed=0, n_plane=1000, n_cube=200):
    rng = np.random.default_rng(seed)
    plane = np.column_stack([rng.uniform(-1, 1, n_plane), rng.uniform(-1, 1, n_plane),
                             rng.normal(0, 0.002, n_plane)])
    cube = rng.uniform([-0.05, -0.05, 0.1], [0.05, 0.05, 0.2], size=(n_cube, 3))
    return plane, cube


def test_cone_cells_empty(cam):
    assert cone_cell_partition(PointCloud(np.empty((0, 3))), cam, RigidTransform.identity(), 4, 4) == []


def test_cone_cells_single_cell_holds_in_frustum_points(cam):
    rng = np.random.default_rng(1)
    pts = rng.uniform([-3, -3, -1], [3, 3, 5], size=(500, 3))
    cells = cone_cell_partition(PointCloud(pts), cam, RigidTransform.identity(), 1, 1)
    inside = [i for i, p in enumerate(pts) if p[2] > 0
              and 0 <= project_point(cam, p).u < cam.width and 0 <= project_point(cam, p).v < cam.height]
    assert len(cells) == 1
    assert cells[0].indices == inside


def test_cone_cells_match_angular_bin_oracle(cam):
    rng = np.random.default_rng(2)
    # Fill the frustum by back-projecting random pixels at random depth.
    u = rng.uniform(0, cam.width, 800)
    v = rng.uniform(0, cam.height, 800)
    z = rng.uniform(0.5, 5, 800)
    pts = np.column_stack([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z])
    cells = cone_cell_partition(PointCloud(pts), cam, RigidTransform.identity(), 4, 4)
    az_lo, az_hi = math.atan(-cam.cx / cam.fx), math.atan((cam.width - cam.cx) / cam.fx)
    el_lo, el_hi = math.atan(-cam.cy / cam.fy), math.atan((cam.height - cam.cy) / cam.fy)
    expected = {}
    for i, (x, y, zz) in enumerate(pts):
        a = min(3, int((math.atan2(x, zz) - az_lo) / (az_hi - az_lo) * 4))
        e = min(3, int((math.atan2(y, zz) - el_lo) / (el_hi - el_lo) * 4))
        expected.setdefault((a, e), []).append(i)
    assert {(c.az_bin, c.el_bin): c.indices for c in cells} == expected
    flat = sorted(i for c in cells for i in c.indices)
    assert flat == list(range(len(pts)))


def test_remove_ground_too_few_points():
    ground, kept = remove_ground([(0, 0, 0), (1, 0, 0)])
    assert ground == [] and kept == [0, 1]


def test_remove_ground_plane_and_cube():
    plane, cube = plane_and_cube()
    pts = np.vstack([plane, cube])
    ground, kept = remove_ground(pts, 15, 0.02, up=(0, 0, 1))
    g = set(ground)
    assert sum(i in g for i in range(len(plane))) >= 0.99 * len(plane)
    assert not any(i in g for i in range(len(plane), len(pts)))
    assert sorted(ground + kept) == list(range(len(pts)))


def test_remove_ground_vertical_wall():
    rng = np.random.default_rng(4)
    wall = np.column_stack([rng.uniform(-1, 1, 500), np.zeros(500), rng.uniform(0, 1, 500)])
    ground, kept = remove_ground(wall, up=(0, 0, 1))
    assert ground == [] and len(kept) == 500


def test_remove_ground_per_cell(cam):
    # Floor 1.5 m below the camera (camera y points down) plus a box in front.
    rng = np.random.default_rng(5)
    floor = np.column_stack([rng.uniform(-2, 2, 3000), rng.normal(1.5, 0.002, 3000), rng.uniform(1, 8, 3000)])
    box = rng.uniform([-0.2, 1.0, 3.0], [0.2, 1.4, 3.4], size=(300, 3))
    cloud = PointCloud(np.vstack([floor, box]))
    cells = cone_cell_partition(cloud, cam, RigidTransform.identity(), 4, 2)
    kept = set(remove_ground_cells(cloud, cells))
    assert all(i in kept for i in range(3000, 3300))
    in_view = {i for c in cells for i in c.indices if i < 3000}
    assert len(in_view - kept) >= 0.95 * len(in_view)


def test_downsample_duplicates_collapse():
    out = downsample(PointCloud(np.tile([0.123, 0.456, 0.789], (100, 1))), 0.01)
    assert len(out) == 1
    assert np.allclose(out.points[0], (0.123, 0.456, 0.789))


def test_downsample_empty():
    assert len(downsample(PointCloud(np.empty((0, 3))), 0.01)) == 0


def test_downsample_voxel_key_oracle():
    rng = np.random.default_rng(6)
    pts = rng.uniform(0, 0.1, size=(500, 3))
    out = downsample(PointCloud(pts), 0.02)
    keys = {}
    for i, p in enumerate(pts):
        keys.setdefault(tuple(np.floor(p / 0.02).astype(int)), []).append(i)
    order = sorted(keys.values(), key=lambda members: members[0])
    assert len(out) == len(order)
    for centroid, members in zip(out.points, order):
        assert np.allclose(centroid, pts[members].mean(axis=0))
    out_keys = [tuple(np.floor(c / 0.02).astype(int)) for c in out.points]
    assert len(set(out_keys)) == len(out_keys)


def test_downsample_idempotent_for_separated_clouds():
    pts = np.array([[0.005, 0.005, 0.005], [0.105, 0.005, 0.005], [0.005, 0.205, 0.005]])
    once = downsample(PointCloud(pts), 0.01)
    assert np.allclose(downsample(once, 0.01).points, once.points)


def test_filter_depth_identity_window_one():
    d = DepthMap(np.random.default_rng(7).uniform(0, 3, (6, 8)))
    assert np.array_equal(filter_depth(d, 1).depth, d.depth)


def test_filter_depth_fills_speckle():
    depth = np.full((5, 5), 1.7)
    depth[2, 2] = 0.0
    out = filter_depth(DepthMap(depth), 3)
    assert out.depth[2, 2] == pytest.approx(1.7)


def test_filter_depth_all_invalid_stays_invalid():
    assert not filter_depth(DepthMap(np.zeros((4, 4))), 5).depth.any()


def test_filter_depth_crop():
    depth = np.arange(1, 21, dtype=float).reshape(4, 5)
    out = filter_depth(DepthMap(depth), 1, crop=(1, 2, 3, 2))
    assert np.array_equal(out.depth, depth[2:4, 1:4])
    with pytest.raises(InvalidCrop):
        filter_depth(DepthMap(depth), 1, crop=(3, 0, 3, 1))


def test_filter_depth_median_of_valid_neighbors_only():
    depth = np.array([[1.0, 2.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 9.0]])
    out = filter_depth(DepthMap(depth), 3)
    # Center sees {1, 2, 9} -> 2; corner (0, 2) sees {2} -> 2.
    assert out.depth[1, 1] == 2.0
    assert out.depth[0, 2] == 2.0


def test_depth_to_cloud_optical_axis(small_cam):
    depth = np.zeros((small_cam.height, small_cam.width))
    depth[12, 16] = 2.0
    cloud = depth_to_cloud(DepthMap(depth), small_cam)
    assert np.allclose(cloud.points, [[0, 0, 2]])


def test_depth_to_cloud_all_invalid(small_cam):
    assert len(depth_to_cloud(DepthMap(np.zeros((24, 32))), small_cam)) == 0


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=50, deadline=None)
def test_depth_round_trip(seed):
    from groundplan.geometry import CameraIntrinsics
    k = CameraIntrinsics(40.0, 42.0, 15.5, 11.0, 32, 24)
    depth = np.random.default_rng(seed).uniform(0, 10, (24, 32))
    depth[depth < 2] = 0
    cloud = depth_to_cloud(DepthMap(depth), k)
    v, u = np.nonzero(depth > 0)
    for p, uu, vv in zip(cloud.points, u, v):
        px = project_point(k, p)
        assert abs(px.u - uu) < 1e-6 and abs(px.v - vv) < 1e-6
