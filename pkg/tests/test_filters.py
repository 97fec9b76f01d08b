import copy

import numpy as np
import pytest

from scanfuse.features import RawMatch
from scanfuse.filters import (
    FilterConfig,
    dense_verify,
    keypoint_filter,
    projected_obb_area,
    run_cascade,
    surface_area_filter,
    STAGE_KEYPOINT,
    STAGE_VERIFIED,
)
from scanfuse.frames import RgbdFrame, build_cache
from scanfuse.geometry import (
    Intrinsics,
    RigidTransform,
    TwistParams,
    alignment_residuals,
    exp_twist,
    kabsch,
)

K = Intrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)
CONFIG = FilterConfig()


class FakeKeypoint:
    def __init__(self, point_cam):
        self.point_cam = np.asarray(point_cam, dtype=float)


def make_pair(points_i, points_j, order=None):
    """Wrap point arrays as keypoints plus matches sorted by given order."""
    n = len(points_i)
    order = list(range(n)) if order is None else order
    kps_i = [FakeKeypoint(p) for p in points_i]
    kps_j = [FakeKeypoint(p) for p in points_j]
    matches = [RawMatch(i, i, 0.01 * rank) for rank, i in enumerate(order)]
    return matches, kps_i, kps_j


def spread_points(rng, n, scale=0.5, z=2.0):
    pts = rng.uniform(-scale, scale, size=(n, 3))
    pts[:, 2] += z
    return pts


def flat_cache(depth=2.0, intensity=0.4, index=0):
    color = np.full((480, 640, 3), 100, dtype=np.uint8)
    frame = RgbdFrame(index=index, color=color, depth=np.full((480, 640), depth, np.float32))
    cache = build_cache(frame, K)
    cache.intensity_low[:] = intensity
    cache.grad_low[:] = 0.0
    return cache


class TestKeypointFilter:
    def test_exact_correspondences_all_retained(self):
        rng = np.random.default_rng(1)
        T_true = exp_twist(TwistParams(np.array([0.1, -0.05, 0.2]), np.array([0.3, 0.1, -0.2])))
        P = spread_points(rng, 10)
        Q = T_true.apply(P)
        matches, kps_i, kps_j = make_pair(P, Q)
        cs = keypoint_filter(matches, kps_i, kps_j, CONFIG)
        assert cs.valid and len(cs) == 10
        assert np.allclose(cs.transform.rotation, T_true.rotation, atol=1e-9)
        assert np.allclose(cs.transform.translation, T_true.translation, atol=1e-9)

    def test_outliers_removed(self):
        rng = np.random.default_rng(2)
        T_true = exp_twist(TwistParams(np.array([0.0, 0.1, 0.0]), np.array([0.2, 0.0, 0.1])))
        P = spread_points(rng, 10)
        Q = T_true.apply(P)
        Q[5] += np.array([0.5, 0.0, 0.0])
        Q[8] += np.array([0.0, -0.5, 0.0])
        matches, kps_i, kps_j = make_pair(P, Q)
        cs = keypoint_filter(matches, kps_i, kps_j, CONFIG)
        assert cs.valid and len(cs) == 8
        kept = set(cs.indices[:, 0].tolist())
        assert 5 not in kept and 8 not in kept

    def test_collinear_discarded(self):
        line = np.outer(np.linspace(0, 0.6, 5), np.array([1.0, 0.3, 0.1]))
        line[:, 2] += 2.0
        matches, kps_i, kps_j = make_pair(line, line)
        cs = keypoint_filter(matches, kps_i, kps_j, CONFIG)
        assert not cs.valid and len(cs) == 0

    def test_min_correspondence_count(self):
        rng = np.random.default_rng(3)
        P5 = spread_points(rng, 5)
        matches, kps_i, kps_j = make_pair(P5, P5)
        assert keypoint_filter(matches, kps_i, kps_j, CONFIG).valid

        P4 = spread_points(rng, 4)
        matches, kps_i, kps_j = make_pair(P4, P4)
        assert not keypoint_filter(matches, kps_i, kps_j, CONFIG).valid

    def test_residual_threshold_both_sides(self):
        # Oracle: closed-form refit residual as a function of the injected
        # displacement, independent of the filter's greedy loop.
        rng = np.random.default_rng(4)
        P = spread_points(rng, 8)
        direction = np.array([0.0, 0.0, 1.0])

        def post_fit_max_residual(delta):
            Q = P.copy()
            Q[3] = Q[3] + direction * delta
            T, _ = kabsch(P, Q)
            return alignment_residuals(T, P, Q).max()

        lo, hi = 0.0, 0.1
        for _ in range(60):  # bisect for the displacement hitting the limit
            mid = 0.5 * (lo + hi)
            if post_fit_max_residual(mid) < CONFIG.kabsch_residual_max:
                lo = mid
            else:
                hi = mid
        delta_at_limit = 0.5 * (lo + hi)

        for factor, keeps_all in ((0.95, True), (1.05, False)):
            Q = P.copy()
            Q[3] = Q[3] + direction * delta_at_limit * factor
            matches, kps_i, kps_j = make_pair(P, Q)
            cs = keypoint_filter(matches, kps_i, kps_j, CONFIG)
            assert cs.valid
            assert (len(cs) == 8) == keeps_all
            residuals = alignment_residuals(cs.transform, cs.points_i, cs.points_j)
            assert residuals.max() <= CONFIG.kabsch_residual_max

    def test_valid_sets_respect_residual_bound(self):
        rng = np.random.default_rng(5)
        for trial in range(20):
            T_true = exp_twist(TwistParams(rng.normal(scale=0.2, size=3), rng.normal(scale=0.3, size=3)))
            P = spread_points(rng, 12)
            Q = T_true.apply(P) + rng.normal(scale=0.01, size=(12, 3))
            matches, kps_i, kps_j = make_pair(P, Q)
            cs = keypoint_filter(matches, kps_i, kps_j, CONFIG)
            if cs.valid:
                residuals = alignment_residuals(cs.transform, cs.points_i, cs.points_j)
                assert residuals.max() <= CONFIG.kabsch_residual_max
                # Monotone cascade: output pairs are a subset of the input.
                assert len(cs) <= 12


class TestSurfaceAreaFilter:
    def square(self, side, z=2.0):
        half = side / 2
        return np.array(
            [[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]]
        )

    def test_square_areas(self):
        assert projected_obb_area(self.square(0.2)) == pytest.approx(0.04, rel=1e-9)
        assert surface_area_filter(self.square(0.2), self.square(0.2), CONFIG)

    def test_coincident_points_fail(self):
        pts = np.tile(np.array([[0.1, 0.2, 2.0]]), (6, 1))
        assert projected_obb_area(pts) == 0.0
        assert not surface_area_filter(pts, pts, CONFIG)

    def test_threshold_boundary(self):
        ok = self.square(0.18)  # 0.0324 m^2
        small = self.square(0.17)  # 0.0289 m^2
        assert projected_obb_area(ok) == pytest.approx(0.0324, rel=1e-9)
        assert projected_obb_area(small) == pytest.approx(0.0289, rel=1e-9)
        assert surface_area_filter(ok, ok, CONFIG)
        assert not surface_area_filter(small, small, CONFIG)

    def test_one_side_small_fails(self):
        assert not surface_area_filter(self.square(0.3), self.square(0.1), CONFIG)

    def test_pca_box_at_least_caliper_area(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            pts = rng.normal(size=(15, 3))
            calipers = projected_obb_area(pts, "calipers")
            pca = projected_obb_area(pts, "pca")
            assert pca >= calipers - 1e-12

    def test_collinear_area_zero(self):
        line = np.outer(np.linspace(0, 1, 8), np.array([1.0, 1.0, 0.0]))
        assert projected_obb_area(line) == 0.0


class TestDenseVerify:
    def test_self_pair_identity(self):
        cache = flat_cache()
        result = dense_verify(cache, cache, RigidTransform.identity(), CONFIG)
        eligible = int(np.count_nonzero(cache.valid_depth & cache.valid_normal))
        assert result.passed
        assert result.mean_error_ij == 0.0 and result.mean_error_ji == 0.0
        assert result.valid_count_ij == eligible
        assert result.valid_count_ji == eligible

    def test_large_axial_offset_fails(self):
        cache = flat_cache()
        moved = RigidTransform(np.eye(3), np.array([0.0, 0.0, 0.3]))
        result = dense_verify(cache, cache, moved, CONFIG)
        assert not result.passed

    def test_depth_gate_both_sides(self):
        base = flat_cache()
        for delta, expect_full in ((0.149, True), (0.151, False)):
            other = copy.deepcopy(base)
            other.points_low[..., 2] += delta
            other.depth_low += delta
            result = dense_verify(base, other, RigidTransform.identity(), CONFIG)
            full = int(np.count_nonzero(base.valid_depth & base.valid_normal))
            if expect_full:
                assert result.valid_count_ij == full
            else:
                assert result.valid_count_ij == 0

    def test_normal_gate_both_sides(self):
        base = flat_cache()
        for cosine, expect_full in ((0.91, True), (0.89, False)):
            other = copy.deepcopy(base)
            angle = np.arccos(cosine)
            R = exp_twist(TwistParams(np.array([angle, 0, 0]), np.zeros(3))).rotation
            other.normals_low = (other.normals_low.reshape(-1, 3) @ R.T).reshape(
                other.normals_low.shape
            ).astype(np.float32)
            result = dense_verify(base, other, RigidTransform.identity(), CONFIG)
            if expect_full:
                assert result.valid_count_ij > 0
            else:
                assert result.valid_count_ij == 0

    def test_color_gate_both_sides(self):
        base = flat_cache(intensity=0.4)
        for diff, expect_full in ((0.09, True), (0.11, False)):
            other = copy.deepcopy(base)
            other.intensity_low[:] = 0.4 + diff
            result = dense_verify(base, other, RigidTransform.identity(), CONFIG)
            if expect_full:
                assert result.valid_count_ij > 0
            else:
                assert result.valid_count_ij == 0

    def test_mean_error_gate_both_sides(self):
        # Lateral point shift: every forward correspondence has error exactly
        # delta, well below the per-pixel distance gate.
        base = flat_cache()
        for delta, expect_pass in ((0.074, True), (0.076, False)):
            other = copy.deepcopy(base)
            other.points_low[..., 0] += delta
            result = dense_verify(base, other, RigidTransform.identity(), CONFIG)
            assert result.passed == expect_pass
            assert result.mean_error_ij == pytest.approx(delta, rel=1e-5)

    def test_min_valid_count_boundary(self):
        # 0.02 * 80 * 60 = 96 pixels is the minimum.
        for count, expect_pass in ((96, True), (95, False)):
            cache = flat_cache()
            keep = np.zeros_like(cache.valid_depth)
            ys, xs = np.nonzero(cache.valid_depth & cache.valid_normal)
            keep[ys[:count], xs[:count]] = True
            cache.valid_depth &= keep
            cache.valid_normal &= keep
            result = dense_verify(cache, cache, RigidTransform.identity(), CONFIG)
            assert result.valid_count_ij == count
            assert result.passed == expect_pass

    def test_half_overlap_plane_views(self):
        cache = flat_cache(depth=2.0)
        viewed_width = 80 * 2.0 / cache.intrinsics_low.fx
        # Relative transform of two cameras shifted by half the viewed width.
        relative = RigidTransform(np.eye(3), np.array([-viewed_width / 2, 0.0, 0.0]))
        result = dense_verify(cache, cache, relative, CONFIG)
        eligible = int(np.count_nonzero(cache.valid_depth & cache.valid_normal))
        assert result.passed
        assert 0.35 * eligible < result.valid_count_ij < 0.65 * eligible
        assert result.mean_error_ij < 1e-4

    def test_two_sided_symmetry(self):
        cache = flat_cache(depth=2.0)
        shift = RigidTransform(np.eye(3), np.array([-0.4, 0.05, 0.0]))
        forward = dense_verify(cache, cache, shift, CONFIG)
        backward = dense_verify(cache, cache, shift.inverse(), CONFIG)
        assert forward.passed == backward.passed
        assert forward.valid_count_ij == backward.valid_count_ji


class TestCascade:
    def test_full_pass(self):
        rng = np.random.default_rng(8)
        cache = flat_cache()
        P = spread_points(rng, 12, scale=0.4)
        matches, kps_i, kps_j = make_pair(P, P)
        result = run_cascade(matches, kps_i, kps_j, cache, cache, CONFIG, 0, 1)
        assert result.stage == STAGE_VERIFIED
        assert result.correspondence_set.valid

    def test_small_area_invalidates(self):
        rng = np.random.default_rng(9)
        cache = flat_cache()
        P = spread_points(rng, 12, scale=0.05)  # spans ~0.01 m^2
        matches, kps_i, kps_j = make_pair(P, P)
        result = run_cascade(matches, kps_i, kps_j, cache, cache, CONFIG, 0, 1)
        assert result.stage == STAGE_KEYPOINT
        assert not result.correspondence_set.valid
