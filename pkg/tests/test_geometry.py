import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundplan.errors import InvalidTransform, NonPositiveDepth
from groundplan.geometry import (CameraIntrinsics, Pixel, RigidTransform, compose, invert, load_calibration,
                                 project_cloud, project_point, rotation_about_axis, save_calibration,
                                 transform_point)

from conftest import random_transform


def test_transform_identity():
    assert np.allclose(transform_point(RigidTransform.identity(), (1, 2, 3)), (1, 2, 3))


def test_transform_pure_translation():
    t = RigidTransform.from_rt(np.eye(3), (0, 0, 1))
    assert np.allclose(transform_point(t, (0, 0, 0)), (0, 0, 1))


def test_transform_quarter_turn_about_z():
    # Hand-evaluated: Rz(90) = [[0,-1,0],[1,0,0],[0,0,1]] maps x to y.
    r = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = RigidTransform.from_rt(r, (0, 0, 0))
    assert np.allclose(transform_point(t, (1, 0, 0)), (0, 1, 0), atol=1e-9)
    assert np.allclose(rotation_about_axis((0, 0, 1), math.pi / 2), r, atol=1e-12)


def test_project_optical_axis(cam):
    for z in (0.1, 1.0, 37.0):
        assert project_point(cam, (0, 0, z)) == Pixel(cam.cx, cam.cy)


def test_project_hand_value(cam):
    # u = 500 * 0.2 / 1 + 320
    assert project_point(cam, (0.2, 0, 1)) == pytest.approx((420.0, 240.0))


@pytest.mark.parametrize("z", [0.0, -1.0])
def test_project_behind_camera(cam, z):
    with pytest.raises(NonPositiveDepth):
        project_point(cam, (0, 0, z))


def test_invert_identity_and_translation():
    assert np.allclose(invert(RigidTransform.identity()).matrix, np.eye(4))
    inv = invert(RigidTransform.from_rt(np.eye(3), (1, 2, 3)))
    assert np.allclose(inv.translation, (-1, -2, -3))


def test_compose_applies_right_first():
    a = RigidTransform.from_rt(np.eye(3), (1, 0, 0))
    b = RigidTransform.from_rt(rotation_about_axis((0, 0, 1), math.pi / 2), (0, 0, 0))
    # b first rotates x to y, then a shifts by +x.
    assert np.allclose(transform_point(compose(a, b), (1, 0, 0)), (1, 1, 0))


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=200, deadline=None)
def test_compose_with_inverse_is_identity(seed):
    t = random_transform(np.random.default_rng(seed))
    assert np.max(np.abs(compose(t, invert(t)).matrix - np.eye(4))) < 1e-9
    assert np.max(np.abs(compose(invert(t), t).matrix - np.eye(4))) < 1e-9


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.05, 20), st.floats(1e-3, 1e3))
def test_projection_is_scale_invariant_along_rays(x, y, z, alpha):
    k = CameraIntrinsics(500.0, 480.0, 320.0, 240.0, 640, 480)
    a, b = project_point(k, (x, y, z)), project_point(k, (alpha * x, alpha * y, alpha * z))
    assert a.u == pytest.approx(b.u, abs=1e-9, rel=1e-12)
    assert a.v == pytest.approx(b.v, abs=1e-9, rel=1e-12)


@pytest.mark.parametrize("bad", [
    np.diag([1.0, 1.0, -1.0, 1.0]),              # reflection
    np.diag([1.0, 2.0, 1.0, 1.0]),               # scaling
    np.eye(3),                                   # wrong shape
])
def test_rejects_non_rigid_matrices(bad):
    with pytest.raises(InvalidTransform):
        RigidTransform(bad)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 0.0, 0.0, 10, 10)
    with pytest.raises(ValueError):
        CameraIntrinsics(1.0, 1.0, 10.0, 0.0, 10, 10)


def test_project_cloud_empty(cam):
    assert project_cloud(cam, RigidTransform.identity(), []) == []


def test_project_cloud_single_axis_point(cam):
    assert project_cloud(cam, RigidTransform.identity(), [(0, 0, 2)]) == [(0, Pixel(cam.cx, cam.cy))]


def test_project_cloud_matches_per_point_oracle(cam):
    rng = np.random.default_rng(3)
    t = random_transform(rng)
    cloud = rng.uniform(-3, 3, size=(400, 3))
    expected = []
    for i, p in enumerate(cloud):
        q = transform_point(t, p)
        if q[2] <= 0:
            continue
        px = project_point(cam, q)
        if 0 <= px.u < cam.width and 0 <= px.v < cam.height:
            expected.append((i, px))
    got = project_cloud(cam, t, cloud)
    assert [i for i, _ in got] == [i for i, _ in expected]
    for (_, a), (_, b) in zip(got, expected):
        assert a.u == pytest.approx(b.u, abs=1e-9) and a.v == pytest.approx(b.v, abs=1e-9)
    assert 0 < len(got) < len(cloud)


def test_calibration_round_trip(tmp_path, cam):
    t = random_transform(np.random.default_rng(9))
    path = tmp_path / "calib.json"
    save_calibration(path, cam, t)
    k2, t2 = load_calibration(path)
    assert k2 == cam
    assert np.array_equal(t2.matrix, t.matrix)
