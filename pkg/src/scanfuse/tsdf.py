"""Sparse voxel-hashed truncated signed distance volume.

Blocks of 8x8x8 voxels are allocated on demand where a frame's truncation
band passes, keyed by integer block coordinate. Each voxel stores running
accumulators (sum of weighted distances, sum of weights, sum of weighted
colors) rather than the averaged values, which makes de-integration the exact
inverse of integration: removing a frame subtracts precisely what integrating
it added, so the volume can follow evolving pose estimates.

One frame's integration (or de-integration) owns the volume exclusively;
distinct volumes are independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Intrinsics, RigidTransform

BLOCK_SIZE = 8
BLOCK_VOXELS = BLOCK_SIZE**3

# Offsets of the 512 voxel centers inside a block, in voxel units.
_ii, _jj, _kk = np.meshgrid(*(np.arange(BLOCK_SIZE),) * 3, indexing="ij")
_VOXEL_OFFSETS = np.stack([_ii, _jj, _kk], axis=-1).reshape(-1, 3).astype(np.float64)

_WEIGHT_EPS = np.float32(1e-6)


class DeintegrationMismatchError(RuntimeError):
    """A frame was de-integrated that was never integrated at this pose."""


@dataclass
class VoxelBlock:
    """Accumulators of one 8x8x8 block (flattened to 512)."""

    weight: np.ndarray  # sum of integration weights
    wdist: np.ndarray  # sum of weight * clamped signed distance
    wcolor: np.ndarray  # (512, 3) sum of weight * color

    @classmethod
    def empty(cls):
        return cls(
            np.zeros(BLOCK_VOXELS, dtype=np.float32),
            np.zeros(BLOCK_VOXELS, dtype=np.float32),
            np.zeros((BLOCK_VOXELS, 3), dtype=np.float32),
        )


def default_truncation(voxel_size: float) -> float:
    """Band half-width: spans several voxels at any usable resolution."""
    return max(0.02, 5.0 * voxel_size)


class TsdfVolume:
    def __init__(self, voxel_size: float = 0.004, truncation: float = None,
                 depth_weighting: bool = False):
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation if truncation is not None
                                else default_truncation(voxel_size))
        self.depth_weighting = depth_weighting
        self.blocks: dict[tuple, VoxelBlock] = {}

    # -- hash-grid surface ---------------------------------------------------

    def block(self, coord) -> VoxelBlock:
        return self.blocks.get(tuple(int(c) for c in coord))

    def allocate(self, coord) -> VoxelBlock:
        key = tuple(int(c) for c in coord)
        existing = self.blocks.get(key)
        if existing is not None:
            return existing
        block = VoxelBlock.empty()
        self.blocks[key] = block
        return block

    @property
    def block_extent(self) -> float:
        return self.voxel_size * BLOCK_SIZE

    def sorted_coords(self):
        return sorted(self.blocks)

    # -- integration -----------------------------------------------------------

    def integrate(self, frame, intrinsics: Intrinsics, pose: RigidTransform):
        """Fuse one frame's depth (and color) at the given camera-to-world pose."""
        self._apply(frame, intrinsics, pose, +1.0)

    def deintegrate(self, frame, intrinsics: Intrinsics, pose: RigidTransform):
        """Exactly remove a previously integrated frame (same frame, same pose)."""
        self._apply(frame, intrinsics, pose, -1.0)

    def _apply(self, frame, intrinsics, pose, sign):
        touched = self._touched_blocks(frame, intrinsics, pose)
        if touched.shape[0] == 0:
            if sign < 0:
                raise DeintegrationMismatchError("frame has no integrated content")
            return
        centers = (
            touched[:, None, :] * self.block_extent
            + (_VOXEL_OFFSETS[None, :, :] + 0.5) * self.voxel_size
        ).reshape(-1, 3)
        cam = pose.inverse().apply(centers)
        pixels, in_front = intrinsics.project_many(cam)
        xi = np.round(pixels[:, 0]).astype(int)
        yi = np.round(pixels[:, 1]).astype(int)
        inside = in_front & (xi >= 0) & (xi < intrinsics.width) & (yi >= 0) & (yi < intrinsics.height)
        xi = np.clip(xi, 0, intrinsics.width - 1)
        yi = np.clip(yi, 0, intrinsics.height - 1)
        depth = frame.depth[yi, xi].astype(np.float64)
        sdf = depth - cam[:, 2]
        mask = inside & (depth > 0.0) & (np.abs(sdf) <= self.truncation)

        if self.depth_weighting:
            weight = np.where(cam[:, 2] > 0.0, 1.0 / np.maximum(cam[:, 2], 1e-6), 0.0)
        else:
            weight = np.ones_like(sdf)
        color = frame.color[yi, xi].astype(np.float64)

        mask = mask.reshape(-1, BLOCK_VOXELS)
        wd = (weight * sdf).reshape(-1, BLOCK_VOXELS).astype(np.float32)
        w = weight.reshape(-1, BLOCK_VOXELS).astype(np.float32)
        wc = (weight[:, None] * color).reshape(-1, BLOCK_VOXELS, 3).astype(np.float32)

        for b, coord in enumerate(map(tuple, touched)):
            hit = mask[b]
            if not np.any(hit):
                if sign < 0 and coord in self.blocks:
                    self._drop_if_empty(coord)
                continue
            block = self.blocks.get(coord)
            if block is None:
                if sign < 0:
                    raise DeintegrationMismatchError(
                        f"block {coord} missing during de-integration"
                    )
                block = self.allocate(coord)
            s = np.float32(sign)
            block.weight[hit] += s * w[b][hit]
            block.wdist[hit] += s * wd[b][hit]
            block.wcolor[hit] += s * wc[b][hit]
            if sign < 0:
                if np.any(block.weight < -_WEIGHT_EPS):
                    raise DeintegrationMismatchError(
                        f"negative weight in block {coord}: de-integration mismatch"
                    )
                reset = np.abs(block.weight) <= _WEIGHT_EPS
                reset &= block.weight != 0.0  # snap float dust only
                block.weight[reset] = 0.0
                cleared = block.weight == 0.0
                block.wdist[cleared] = 0.0
                block.wcolor[cleared] = 0.0
                self._drop_if_empty(coord)

    def _drop_if_empty(self, coord):
        block = self.blocks.get(coord)
        if block is not None and not np.any(block.weight):
            del self.blocks[coord]

    def _touched_blocks(self, frame, intrinsics, pose):
        """Block coordinates whose volume the frame's truncation band crosses."""
        valid = frame.depth > 0.0
        if not np.any(valid):
            return np.zeros((0, 3), dtype=np.int64)
        ys, xs = np.nonzero(valid)
        depth = frame.depth[ys, xs].astype(np.float64)
        pixels = np.stack([xs, ys], axis=-1).astype(np.float64)
        rays = intrinsics.unproject(pixels, np.ones_like(depth))
        near = rays * np.maximum(depth - self.truncation, 1e-3)[:, None]
        far = rays * (depth + self.truncation)[:, None]
        world_near = pose.apply(near)
        world_far = pose.apply(far)
        samples = max(2, int(np.ceil(4.0 * self.truncation / self.block_extent)) + 1)
        keys = []
        for t in np.linspace(0.0, 1.0, samples):
            pts = world_near + t * (world_far - world_near)
            coords = np.floor(pts / self.block_extent).astype(np.int64)
            keys.append(self._encode(coords))
        unique = np.unique(np.concatenate(keys))
        return self._decode(unique)

    # Block coordinates are packed into one int64 so deduplication is a flat
    # unique; the range covers +-2^20 blocks per axis.
    _SHIFT = np.int64(1) << 20
    _MASK = (np.int64(1) << 21) - 1

    def _encode(self, coords):
        c = coords + self._SHIFT
        return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]

    def _decode(self, keys):
        out = np.empty((keys.shape[0], 3), dtype=np.int64)
        out[:, 2] = (keys & self._MASK) - self._SHIFT
        out[:, 1] = ((keys >> 21) & self._MASK) - self._SHIFT
        out[:, 0] = ((keys >> 42) & self._MASK) - self._SHIFT
        return out

    # -- read access -----------------------------------------------------------

    def voxel_state(self, world_point):
        """(distance, weight) of the voxel containing a world point; (None, 0) if empty."""
        p = np.asarray(world_point, dtype=np.float64)
        voxel = np.floor(p / self.voxel_size).astype(int)
        coord = tuple(np.floor(p / self.block_extent).astype(int))
        block = self.blocks.get(coord)
        if block is None:
            return None, 0.0
        local = voxel - np.array(coord) * BLOCK_SIZE
        idx = int(local[0]) * BLOCK_SIZE * BLOCK_SIZE + int(local[1]) * BLOCK_SIZE + int(local[2])
        w = float(block.weight[idx])
        if w <= 0.0:
            return None, 0.0
        return float(block.wdist[idx] / block.weight[idx]), w

    def occupied_voxel_count(self):
        return sum(int(np.count_nonzero(b.weight)) for b in self.blocks.values())


def volumes_equal(a: TsdfVolume, b: TsdfVolume, dist_tol: float = 1e-5) -> bool:
    """Equality over occupied voxels: weights exact, distances within tolerance."""
    coords = set(a.blocks) | set(b.blocks)
    for coord in coords:
        ba, bb = a.blocks.get(coord), b.blocks.get(coord)
        wa = ba.weight if ba is not None else np.zeros(BLOCK_VOXELS, np.float32)
        wb = bb.weight if bb is not None else np.zeros(BLOCK_VOXELS, np.float32)
        if not np.array_equal(wa, wb):
            return False
        occupied = wa > 0
        if not np.any(occupied):
            continue
        da = ba.wdist[occupied] / wa[occupied]
        db = bb.wdist[occupied] / wb[occupied]
        if np.max(np.abs(da - db)) > dist_tol:
            return False
    return True


def save_volume(path, volume: TsdfVolume):
    """Dump the sparse volume to a .npz archive (sorted block order)."""
    coords = volume.sorted_coords()
    np.savez_compressed(
        path,
        voxel_size=volume.voxel_size,
        truncation=volume.truncation,
        coords=np.array(coords, dtype=np.int64).reshape(-1, 3),
        weight=np.stack([volume.blocks[c].weight for c in coords])
        if coords else np.zeros((0, BLOCK_VOXELS), np.float32),
        wdist=np.stack([volume.blocks[c].wdist for c in coords])
        if coords else np.zeros((0, BLOCK_VOXELS), np.float32),
        wcolor=np.stack([volume.blocks[c].wcolor for c in coords])
        if coords else np.zeros((0, BLOCK_VOXELS, 3), np.float32),
    )


def load_volume(path) -> TsdfVolume:
    data = np.load(path)
    volume = TsdfVolume(float(data["voxel_size"]), float(data["truncation"]))
    for idx, coord in enumerate(map(tuple, data["coords"])):
        volume.blocks[coord] = VoxelBlock(
            data["weight"][idx].copy(), data["wdist"][idx].copy(), data["wcolor"][idx].copy()
        )
    return volume
