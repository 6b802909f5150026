import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groundplan.confidence import (EntropyVector, NormalizationContext, PointTrack, ScoredPoint, TaskKind,
                                   WeightProfile, confidence_score, depth_entropy, geometric_entropy,
                                   mahalanobis_sq, mask_centroids, norm_entropy, score_cloud, spatial_entropy,
                                   temporal_entropy, weight_profile_for_task)
from groundplan.errors import DomainError, InsufficientNeighbors, NoValidDepth
from groundplan.geometry import Pixel, RigidTransform
from groundplan.preprocess import DepthMap, LabelMask, PointCloud


@pytest.mark.parametrize("p", [0.0, 1.0])
def test_norm_entropy_zero_at_ends(p):
    assert norm_entropy(p) == 0.0


def test_norm_entropy_peak():
    assert norm_entropy(1 / math.e) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("p", [-1e-9, 1.0000001, float("nan")])
def test_norm_entropy_domain(p):
    with pytest.raises(DomainError):
        norm_entropy(p)


@given(st.floats(0, 1))
def test_norm_entropy_bounded(p):
    assert 0.0 <= norm_entropy(p) <= 1.0


def test_spatial_entropy_examples():
    assert spatial_entropy(Pixel(3, 4), Pixel(3, 4)) == 0.0
    d = math.e - 1
    assert spatial_entropy(Pixel(d, 0), Pixel(0, 0)) == pytest.approx(1.0, abs=1e-12)
    assert spatial_entropy(Pixel(1e9, 0), Pixel(0, 0)) < 1e-6


def test_spatial_entropy_scale():
    # Distance 2 * (e - 1) at scale 2 behaves like e - 1 in raw pixels.
    assert spatial_entropy((2 * (math.e - 1), 0), (0, 0), scale=2.0) == pytest.approx(1.0, abs=1e-12)


def unit_cov_neighbors():
    # +-1 along each axis has mean 0 and population covariance I / 3; scale by sqrt(3).
    base = np.vstack([np.eye(3), -np.eye(3)]) * math.sqrt(3)
    return base


def test_geometric_entropy_unit_covariance():
    nb = unit_cov_neighbors()
    assert np.allclose(np.cov(nb.T, bias=True), np.eye(3))
    direct = float(np.array([1, 0, 0]) @ np.linalg.solve(np.eye(3) * (1 + 1e-6), np.array([1, 0, 0])))
    assert mahalanobis_sq((1, 0, 0), nb) == pytest.approx(direct, rel=1e-12)
    h = geometric_entropy((1, 0, 0), nb, NormalizationContext(mahalanobis_max=math.e))
    assert h == pytest.approx(1.0, abs=1e-9)


def test_geometric_entropy_at_mean_and_too_few():
    nb = unit_cov_neighbors()
    assert geometric_entropy((0, 0, 0), nb, NormalizationContext()) == 0.0
    with pytest.raises(InsufficientNeighbors):
        geometric_entropy((0, 0, 0), nb[:3], NormalizationContext())


def test_mahalanobis_matches_scipy():
    from scipy.spatial.distance import mahalanobis
    rng = np.random.default_rng(0)
    nb = rng.normal(size=(20, 3)) * [1.0, 0.5, 2.0]
    p = rng.normal(size=3)
    cov = np.cov(nb.T, bias=True) + 1e-6 * np.eye(3)
    ref = mahalanobis(p, nb.mean(axis=0), np.linalg.inv(cov)) ** 2
    assert mahalanobis_sq(p, nb) == pytest.approx(ref, rel=1e-9)


def test_depth_entropy_examples():
    ctx = NormalizationContext(sigma_max=1.0)
    assert depth_entropy([2.0] * 9, ctx) == 0.0
    # Two values a +- s have population variance s^2.
    s = math.sqrt(1 / math.e)
    assert depth_entropy([3 - s, 3 + s], ctx) == pytest.approx(1.0, abs=1e-9)
    assert depth_entropy([1.0, 5.0], ctx) == 0.0
    with pytest.raises(NoValidDepth):
        depth_entropy([0.0, 0.0], ctx)


def test_temporal_entropy_examples():
    ctx = NormalizationContext(d_max=1.0)
    assert temporal_entropy(PointTrack([[1, 2, 3]] * 4), ctx) == 0.0
    assert temporal_entropy(PointTrack([[1, 2, 3]]), ctx) == 0.0
    track = PointTrack([[0, 0, 0], [0.1, 0, 0], [0.1, 0.3, 0]])
    expected = math.e * -(1 / 6) * math.log(1 / 6)
    assert temporal_entropy(track, ctx) == pytest.approx(expected, abs=1e-12)
    # Quoted as ~0.8120; the exact value is 0.81175.
    assert expected == pytest.approx(0.8120, abs=5e-4)


def test_confidence_examples():
    assert confidence_score(EntropyVector(), WeightProfile()) == 1.0
    c = confidence_score(EntropyVector(h1=0.5), WeightProfile(2, 0, 0, 0))
    assert c == pytest.approx(0.3678794, abs=1e-7)


@given(st.lists(st.floats(0, 1), min_size=4, max_size=4), st.lists(st.floats(0, 10), min_size=4, max_size=4))
def test_log_identity(h, lam):
    if not any(x > 0 for x in lam):
        lam[0] = 1.0
    c = confidence_score(EntropyVector(*h), WeightProfile(*lam))
    assert 0 < c <= 1
    assert abs(math.log(c) + sum(a * b for a, b in zip(lam, h))) < 1e-12


@given(st.floats(0, 0.99), st.floats(0.001, 0.01), st.integers(0, 3))
def test_strictly_decreasing(h, dh, n):
    base = [0.2, 0.2, 0.2, 0.2]
    hi = list(base)
    base[n] = h
    hi[n] = h + dh
    w = WeightProfile(1, 1, 1, 1)
    assert confidence_score(EntropyVector(*hi), w) < confidence_score(EntropyVector(*base), w)


def test_weight_profiles():
    assert weight_profile_for_task("Balanced").as_tuple() == (1, 1, 1, 1)
    hp = weight_profile_for_task(TaskKind.HIGH_PRECISION).as_tuple()
    assert hp == (2, 2, 1, 1)
    dyn = weight_profile_for_task("Dynamic").as_tuple()
    assert dyn[3] > max(dyn[:3])
    cl = weight_profile_for_task("Cluttered").as_tuple()
    assert cl[2] > 1
    with pytest.raises(ValueError):
        weight_profile_for_task("Fast")


@pytest.mark.parametrize("w", [(0, 0, 0, 0), (-1, 1, 1, 1), (math.inf, 1, 1, 1)])
def test_invalid_weights(w):
    with pytest.raises(ValueError):
        WeightProfile(*w)


def test_entropy_vector_bounds():
    with pytest.raises(ValueError):
        EntropyVector(h1=1.5)


def flat_scene(small_cam, n=200, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.uniform(0, small_cam.width - 1, n)
    v = rng.uniform(0, small_cam.height - 1, n)
    z = rng.uniform(1.0, 2.0, n)
    pts = np.column_stack([(u - small_cam.cx) * z / small_cam.fx, (v - small_cam.cy) * z / small_cam.fy, z])
    labels = np.zeros((small_cam.height, small_cam.width), dtype=int)
    labels[2:10, 3:14] = 1
    labels[12:22, 18:30] = 2
    depth = rng.uniform(1.0, 2.0, (small_cam.height, small_cam.width))
    return PointCloud(pts), LabelMask(labels), DepthMap(depth)


def test_score_cloud_empty(small_cam):
    _, masks, depth = flat_scene(small_cam)
    assert score_cloud(PointCloud(np.empty((0, 3))), masks, depth, None, small_cam,
                       RigidTransform.identity(), WeightProfile()) == []


def test_score_cloud_single_axis_point(small_cam):
    depth = DepthMap(np.full((24, 32), 2.0))
    labels = np.zeros((24, 32), dtype=int)
    labels[12, 16] = 1
    out = score_cloud(PointCloud([[0, 0, 2.0]]), LabelMask(labels), depth, None, small_cam,
                      RigidTransform.identity(), WeightProfile())
    assert len(out) == 1
    assert out[0].entropies.as_tuple() == (0, 0, 0, 0)
    assert out[0].confidence == 1.0
    assert out[0].mask_id == 1


def test_score_cloud_recomputation_oracle(small_cam):
    cloud, masks, depth = flat_scene(small_cam)
    tracks = {i: PointTrack([cloud.points[i], cloud.points[i] + [0.01 * (i % 5), 0, 0]]) for i in range(0, 200, 3)}
    w = WeightProfile(1.0, 2.0, 0.5, 1.5)
    out = score_cloud(cloud, masks, depth, tracks, small_cam, RigidTransform.identity(), w)
    assert len(out) == 200
    centroids = mask_centroids(masks)
    for sp in out:
        h = sp.entropies.as_tuple()
        assert sp.confidence == pytest.approx(math.exp(-(1.0 * h[0] + 2.0 * h[1] + 0.5 * h[2] + 1.5 * h[3])),
                                              rel=1e-12)
        assert abs(math.log(sp.confidence) + sum(a * b for a, b in zip(w.as_tuple(), h))) < 1e-12
        r, c = int(math.floor(sp.pixel.v + 0.5)), int(math.floor(sp.pixel.u + 0.5))
        assert sp.mask_id == masks.labels[min(r, 23), min(c, 31)]
        if sp.mask_id:
            assert h[0] == pytest.approx(spatial_entropy(sp.pixel, centroids[sp.mask_id]), abs=1e-12)
        else:
            assert h[0] == 0.0
        if sp.point_index not in tracks:
            assert h[3] == 0.0
    assert any(sp.entropies.h4 > 0 for sp in out)


def test_score_cloud_deterministic_and_scale_invariant(small_cam):
    cloud, masks, depth = flat_scene(small_cam, seed=3)
    w = WeightProfile(1, 1, 1, 1)
    a = score_cloud(cloud, masks, depth, None, small_cam, RigidTransform.identity(), w)
    b = score_cloud(cloud, masks, depth, None, small_cam, RigidTransform.identity(), w)
    assert [s.to_dict() for s in a] == [s.to_dict() for s in b]
    c = score_cloud(cloud, masks, depth, None, small_cam, RigidTransform.identity(), w.scaled(3.0))
    assert np.argmax([s.confidence for s in a]) == np.argmax([s.confidence for s in c])


def test_score_cloud_dimension_mismatch(small_cam):
    cloud, masks, _ = flat_scene(small_cam)
    with pytest.raises(ValueError):
        score_cloud(cloud, masks, DepthMap(np.ones((5, 5))), None, small_cam, RigidTransform.identity(),
                    WeightProfile())


def test_scored_point_dict_round_trip(small_cam):
    cloud, masks, depth = flat_scene(small_cam, n=20)
    for sp in score_cloud(cloud, masks, depth, None, small_cam, RigidTransform.identity(), WeightProfile()):
        assert ScoredPoint.from_dict(sp.to_dict()) == sp
