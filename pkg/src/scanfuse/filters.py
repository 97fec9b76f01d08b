"""Three-stage correspondence filter cascade.

Raw descriptor matches between a frame pair pass through:

1. the keypoint filter: greedy aggregation with per-insertion rigid refit and
   covariance condition analysis, dropping high-residual pairs;
2. the surface-area filter: both 3D point sets must span enough physical
   surface (projected oriented bounding box);
3. dense verification: a two-sided per-pixel depth / normal / intensity
   consistency check of the estimated relative transform on the cached
   low-resolution frames.

Each stage only removes or invalidates correspondences. Every frame pair is
filtered independently, so pairs may be processed in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .frames import CachedFrame
from .geometry import RigidTransform, alignment_residuals, condition_analysis, kabsch
from .interp import bilinear_sample

# Cascade stages a frame pair can reach, in order.
STAGE_NONE = 0
STAGE_RAW = 1
STAGE_KEYPOINT = 2
STAGE_VERIFIED = 3


@dataclass
class FilterConfig:
    """Thresholds of the correspondence cascade (meters where dimensional)."""

    kabsch_residual_max: float = 0.02
    condition_limit: float = 100.0
    min_surface_area: float = 0.032  # m^2
    verify_depth_max: float = 0.15  # point distance gate
    verify_normal_min: float = 0.9  # cosine of normal deviation
    verify_color_max: float = 0.1  # intensity difference gate
    verify_error_max: float = 0.075  # mean reprojection error gate
    verify_min_valid_fraction: float = 0.02  # of w'*h' pixels
    min_correspondences: int = 5
    obb_method: str = "calipers"  # or "pca"


@dataclass
class CorrespondenceSet:
    """Filtered 3D keypoint matches between two frames with their relative transform.

    ``transform`` maps frame_i camera space into frame_j camera space.
    """

    frame_i: int
    frame_j: int
    points_i: np.ndarray  # (N, 3)
    points_j: np.ndarray  # (N, 3)
    indices: np.ndarray  # (N, 2) keypoint ids
    transform: RigidTransform = None
    valid: bool = False

    def __len__(self):
        return self.points_i.shape[0]


def _empty_set(frame_i, frame_j):
    return CorrespondenceSet(
        frame_i=frame_i,
        frame_j=frame_j,
        points_i=np.zeros((0, 3)),
        points_j=np.zeros((0, 3)),
        indices=np.zeros((0, 2), dtype=int),
        transform=None,
        valid=False,
    )


def keypoint_filter(matches, keypoints_i, keypoints_j, config: FilterConfig,
                    frame_i: int = 0, frame_j: int = 1) -> CorrespondenceSet:
    """Greedy rigid-consistency filter over descriptor matches.

    Matches must arrive sorted ascending by descriptor distance. After each
    addition the current set is refit (closed-form alignment) and checked for
    residual tightness and covariance stability; violating sets shed their
    worst-residual pairs until consistent again or undetermined. An
    unsalvageable pair of frames yields an empty invalid set.
    """
    points_i = [np.asarray(keypoints_i[m.index_a].point_cam, float) for m in matches]
    points_j = [np.asarray(keypoints_j[m.index_b].point_cam, float) for m in matches]
    index_pairs = [(m.index_a, m.index_b) for m in matches]

    current: list[int] = []
    transform = None

    def refit_and_trim():
        nonlocal transform
        while len(current) >= 3:
            P = np.array([points_i[k] for k in current])
            Q = np.array([points_j[k] for k in current])
            estimate, _ = kabsch(P, Q)
            residuals = alignment_residuals(estimate, P, Q)
            report = condition_analysis(P, Q, limit=config.condition_limit)
            if residuals.max() <= config.kabsch_residual_max and report.stable:
                transform = estimate
                return True
            current.pop(int(np.argmax(residuals)))
        transform = None
        return False

    for idx in range(len(matches)):
        current.append(idx)
        if len(current) >= 3:
            refit_and_trim()

    if len(current) >= 3 and refit_and_trim() and len(current) >= config.min_correspondences:
        return CorrespondenceSet(
            frame_i=frame_i,
            frame_j=frame_j,
            points_i=np.array([points_i[k] for k in current]),
            points_j=np.array([points_j[k] for k in current]),
            indices=np.array([index_pairs[k] for k in current], dtype=int),
            transform=transform,
            valid=True,
        )
    return _empty_set(frame_i, frame_j)


def _convex_hull_2d(points):
    """Monotone-chain convex hull; returns CCW hull vertices."""
    pts = np.unique(np.round(points, 12), axis=0)
    if pts.shape[0] < 3:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    return hull


def _min_area_rect_area(points2d) -> float:
    """Exact minimum-area oriented bounding box via rotating calipers."""
    hull = _convex_hull_2d(points2d)
    if hull.shape[0] < 3:
        return 0.0
    best = np.inf
    edges = np.roll(hull, -1, axis=0) - hull
    lengths = np.linalg.norm(edges, axis=1)
    for edge, length in zip(edges, lengths):
        if length < 1e-12:
            continue
        d = edge / length
        n = np.array([-d[1], d[0]])
        along = points2d @ d
        across = points2d @ n
        area = (along.max() - along.min()) * (across.max() - across.min())
        best = min(best, area)
    return float(best) if np.isfinite(best) else 0.0


def projected_obb_area(points, method: str = "calipers") -> float:
    """Area of the oriented bounding box of points projected on their two principal axes."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] < 3:
        return 0.0
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / pts.shape[0]
    _, vecs = np.linalg.eigh(cov)
    axes = vecs[:, -2:]  # two largest principal directions
    proj = centered @ axes
    if method == "pca":
        return float(np.ptp(proj[:, 0]) * np.ptp(proj[:, 1]))
    return _min_area_rect_area(proj)


def surface_area_filter(points_i, points_j, config: FilterConfig) -> bool:
    """Both point sets must span at least the configured projected surface area."""
    return (
        projected_obb_area(points_i, config.obb_method) >= config.min_surface_area
        and projected_obb_area(points_j, config.obb_method) >= config.min_surface_area
    )


@dataclass
class DenseVerifyResult:
    passed: bool
    mean_error_ij: float
    mean_error_ji: float
    valid_count_ij: int
    valid_count_ji: int

    @property
    def mean_error(self):
        return max(self.mean_error_ij, self.mean_error_ji)

    @property
    def valid_count(self):
        return min(self.valid_count_ij, self.valid_count_ji)


def _verify_one_direction(cache_src: CachedFrame, cache_dst: CachedFrame,
                          transform: RigidTransform, config: FilterConfig):
    eligible = cache_src.valid_depth & cache_src.valid_normal
    if not np.any(eligible):
        return 0.0, 0
    points = cache_src.points_low[eligible].astype(np.float64)
    normals = cache_src.normals_low[eligible].astype(np.float64)
    intensity = cache_src.intensity_low[eligible].astype(np.float64)

    moved = transform.apply(points)
    k = cache_dst.intrinsics_low
    pixels, in_front = k.project_many(moved)
    xi = np.round(pixels[:, 0]).astype(int)
    yi = np.round(pixels[:, 1]).astype(int)
    inside = in_front & (xi >= 0) & (xi < k.width) & (yi >= 0) & (yi < k.height)
    xi, yi = np.clip(xi, 0, k.width - 1), np.clip(yi, 0, k.height - 1)

    dst_ok = cache_dst.valid_depth[yi, xi] & cache_dst.valid_normal[yi, xi] & inside
    dst_points = cache_dst.points_low[yi, xi].astype(np.float64)
    dst_normals = cache_dst.normals_low[yi, xi].astype(np.float64)

    distance = np.linalg.norm(moved - dst_points, axis=1)
    normal_dot = np.sum(transform.rotate(normals) * dst_normals, axis=1)
    dst_intensity = bilinear_sample(cache_dst.intensity_low, pixels[:, 0], pixels[:, 1])
    color_diff = np.abs(intensity - dst_intensity)

    good = (
        dst_ok
        & (distance < config.verify_depth_max)
        & (normal_dot > config.verify_normal_min)
        & (color_diff < config.verify_color_max)
    )
    count = int(np.count_nonzero(good))
    mean_error = float(distance[good].sum() / count) if count else 0.0
    return mean_error, count


def dense_verify(cache_i: CachedFrame, cache_j: CachedFrame,
                 transform_ij: RigidTransform, config: FilterConfig,
                 error_max: float = None) -> DenseVerifyResult:
    """Two-sided dense consistency check of a relative transform.

    Each valid pixel of one frame is reprojected into the other; a pixel
    correspondence counts only if point distance, normal deviation and
    intensity difference all pass their gates. The pair passes when both
    directions keep enough pixels and their mean reprojection error stays at
    or below ``error_max`` (the config default, or an override such as the
    tighter chunk re-check bound).
    """
    if error_max is None:
        error_max = config.verify_error_max
    err_ij, count_ij = _verify_one_direction(cache_i, cache_j, transform_ij, config)
    err_ji, count_ji = _verify_one_direction(cache_j, cache_i, transform_ij.inverse(), config)
    k = cache_i.intrinsics_low
    min_count = config.verify_min_valid_fraction * k.width * k.height
    passed = (
        count_ij >= min_count
        and count_ji >= min_count
        and err_ij <= error_max
        and err_ji <= error_max
    )
    return DenseVerifyResult(passed, err_ij, err_ji, count_ij, count_ji)


@dataclass
class CascadeResult:
    correspondence_set: CorrespondenceSet
    stage: int = STAGE_NONE
    verify: DenseVerifyResult = field(default=None)


def run_cascade(matches, keypoints_i, keypoints_j, cache_i, cache_j,
                config: FilterConfig, frame_i: int, frame_j: int) -> CascadeResult:
    """Run all three filter stages for one frame pair."""
    if len(matches) < config.min_correspondences:
        return CascadeResult(_empty_set(frame_i, frame_j), STAGE_NONE)
    cs = keypoint_filter(matches, keypoints_i, keypoints_j, config, frame_i, frame_j)
    if not cs.valid:
        return CascadeResult(cs, STAGE_RAW)
    if not surface_area_filter(cs.points_i, cs.points_j, config):
        cs.valid = False
        return CascadeResult(cs, STAGE_KEYPOINT)
    verify = dense_verify(cache_i, cache_j, cs.transform, config)
    if not verify.passed:
        cs.valid = False
        return CascadeResult(cs, STAGE_KEYPOINT, verify)
    return CascadeResult(cs, STAGE_VERIFIED, verify)
