"""RGB-D frame ingestion and per-frame cached derivatives.

Each incoming frame is reduced once to a small working resolution (default
80x60): block-median depth, block-mean luminance, camera-space points, surface
normals and the intensity gradient are cached and reused by the dense
verification filter and the dense alignment terms.

Cache construction is per-frame independent and a CachedFrame is immutable
after construction, so frames may be processed in parallel.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, RigidTransform

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass
class RgbdFrame:
    """One aligned color + depth capture. Depth is meters, 0 marks invalid."""

    index: int
    color: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float32, 0 = invalid
    timestamp: float = 0.0

    def luminance(self) -> np.ndarray:
        """Normalized [0, 1] luminance (0.299 R + 0.587 G + 0.114 B)."""
        return (self.color.astype(np.float32) @ LUMA_WEIGHTS.astype(np.float32)) / 255.0


@dataclass
class CachedFrame:
    """Downsampled working copy of a frame: intensity, gradient, depth, points, normals."""

    index: int
    intensity_low: np.ndarray  # (h', w') float32 in [0, 1]
    grad_low: np.ndarray  # (h', w', 2) float32, (d/dx, d/dy) of intensity_low
    depth_low: np.ndarray  # (h', w') float32 meters, 0 = invalid
    points_low: np.ndarray  # (h', w', 3) float32 camera-space, defined where depth valid
    normals_low: np.ndarray  # (h', w', 3) float32 unit normals, 0 where invalid
    intrinsics_low: Intrinsics
    valid_depth: np.ndarray = field(repr=False, default=None)  # (h', w') bool
    valid_normal: np.ndarray = field(repr=False, default=None)  # (h', w') bool


def _block_reduce_median(values, block_h, block_w):
    """Median of the valid (> 0) samples per block; 0 where a block has none."""
    h, w = values.shape
    blocks = values.reshape(h // block_h, block_h, w // block_w, block_w)
    blocks = blocks.transpose(0, 2, 1, 3).reshape(h // block_h, w // block_w, -1)
    out = np.zeros(blocks.shape[:2], dtype=np.float32)
    invalid = blocks <= 0.0
    masked = np.where(invalid, np.nan, blocks)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN blocks are expected
        med = np.nanmedian(masked, axis=2)
    has_valid = ~np.all(invalid, axis=2)
    out[has_valid] = med[has_valid].astype(np.float32)
    return out


def _block_reduce_mean(values, block_h, block_w):
    h, w = values.shape
    blocks = values.reshape(h // block_h, block_h, w // block_w, block_w)
    return blocks.mean(axis=(1, 3)).astype(np.float32)


def build_cache(
    frame: RgbdFrame,
    intrinsics: Intrinsics,
    low_width: int = 80,
    low_height: int = 60,
) -> CachedFrame:
    """Build the downsampled per-frame cache.

    The frame dimensions must divide evenly into ``low_width x low_height``
    blocks. Depth reduces by block median over valid samples (preserving
    invalids), intensity by block mean; points come from unprojecting the
    reduced depth with the rescaled intrinsics, normals from central
    differences of neighboring points, and the gradient from central
    differences of the reduced intensity.
    """
    h, w = frame.depth.shape
    if h % low_height or w % low_width:
        raise ValueError(
            f"frame {w}x{h} does not divide into {low_width}x{low_height} blocks"
        )
    block_h, block_w = h // low_height, w // low_width

    intensity = _block_reduce_mean(frame.luminance(), block_h, block_w)
    depth = _block_reduce_median(frame.depth.astype(np.float32), block_h, block_w)
    k_low = intrinsics.scaled(low_width, low_height)

    xs, ys = np.meshgrid(np.arange(low_width), np.arange(low_height))
    valid = depth > 0.0
    pixels = np.stack([xs, ys], axis=-1).astype(np.float64)
    points = k_low.unproject(pixels, depth.astype(np.float64)).astype(np.float32)
    points[~valid] = 0.0

    normals, valid_normal = _estimate_normals(points, valid)

    grad = np.zeros((low_height, low_width, 2), dtype=np.float32)
    grad[:, 1:-1, 0] = 0.5 * (intensity[:, 2:] - intensity[:, :-2])
    grad[1:-1, :, 1] = 0.5 * (intensity[2:, :] - intensity[:-2, :])

    return CachedFrame(
        index=frame.index,
        intensity_low=intensity,
        grad_low=grad,
        depth_low=depth,
        points_low=points,
        normals_low=normals,
        intrinsics_low=k_low,
        valid_depth=valid,
        valid_normal=valid_normal,
    )


def _estimate_normals(points, valid):
    """Unit normals from central differences of camera-space points, facing the camera."""
    h, w = valid.shape
    normals = np.zeros((h, w, 3), dtype=np.float32)
    ok = np.zeros((h, w), dtype=bool)
    ok[1:-1, 1:-1] = (
        valid[1:-1, 1:-1]
        & valid[1:-1, 2:]
        & valid[1:-1, :-2]
        & valid[2:, 1:-1]
        & valid[:-2, 1:-1]
    )
    dx = np.zeros((h, w, 3), dtype=np.float32)
    dy = np.zeros((h, w, 3), dtype=np.float32)
    dx[1:-1, 1:-1] = points[1:-1, 2:] - points[1:-1, :-2]
    dy[1:-1, 1:-1] = points[2:, 1:-1] - points[:-2, 1:-1]
    n = np.cross(dy.reshape(-1, 3), dx.reshape(-1, 3)).reshape(h, w, 3)
    length = np.linalg.norm(n, axis=-1)
    ok &= length > 1e-12
    n[ok] /= length[ok][..., None]
    # Orient toward the camera (viewing direction is +z from the origin).
    flip = np.sum(n * points, axis=-1) > 0.0
    n[flip & ok] *= -1.0
    n[~ok] = 0.0
    normals[:] = n
    return normals, ok


def frustum_overlap(
    cache_a: CachedFrame,
    pose_a: RigidTransform,
    cache_b: CachedFrame,
    pose_b: RigidTransform,
) -> float:
    """Fraction of a's valid cached points that land inside b's view.

    Points of ``a`` are mapped through ``pose_b^-1 o pose_a`` and must project
    inside b's image bounds with positive depth.
    """
    valid = cache_a.valid_depth
    if not np.any(valid):
        return 0.0
    points = cache_a.points_low[valid].astype(np.float64)
    relative = pose_b.inverse() @ pose_a
    moved = relative.apply(points)
    k = cache_b.intrinsics_low
    pixels, in_front = k.project_many(moved)
    inside = (
        in_front
        & (pixels[:, 0] >= 0.0)
        & (pixels[:, 0] <= k.width - 1)
        & (pixels[:, 1] >= 0.0)
        & (pixels[:, 1] <= k.height - 1)
    )
    return float(np.count_nonzero(inside)) / float(points.shape[0])


def view_angle_deg(pose_a: RigidTransform, pose_b: RigidTransform) -> float:
    """Angle in degrees between the two cameras' viewing directions."""
    za = pose_a.rotation[:, 2]
    zb = pose_b.rotation[:, 2]
    cosang = np.clip(np.dot(za, zb), -1.0, 1.0)
    return float(np.degrees(np.arccos(cosang)))
