"""Keypoint detection and descriptor matching.

The detector is pluggable: the scale-space reference detector finds
difference-of-Gaussian extrema over 3 octaves with 3 scored scales each,
assigns a dominant gradient orientation and builds a 4x4x8 gradient-histogram
descriptor. A file-based detector replays precomputed keypoints so everything
downstream can be tested on exact inputs.

Detection is per-frame independent and matching per-pair independent; all
outputs are immutable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .frames import RgbdFrame
from .geometry import Intrinsics

DESCRIPTOR_DIM = 128


@dataclass
class Keypoint:
    """A detected feature with valid depth and a unit-norm descriptor."""

    pixel: np.ndarray  # (2,) full-resolution (x, y)
    depth: float  # meters
    point_cam: np.ndarray  # (3,) camera space
    scale: float  # pixels
    orientation: float  # radians
    descriptor: np.ndarray  # (DESCRIPTOR_DIM,) float32, unit L2


@dataclass
class RawMatch:
    """Candidate correspondence between keypoint indices of two frames."""

    index_a: int
    index_b: int
    distance: float


def descriptor_matrix(keypoints) -> np.ndarray:
    if not keypoints:
        return np.zeros((0, DESCRIPTOR_DIM), dtype=np.float32)
    return np.stack([k.descriptor for k in keypoints]).astype(np.float32)


def match_descriptors(desc_a, desc_b, ratio: float = 0.8):
    """Mutual nearest-neighbor matches passing the distance-ratio test both ways.

    Returns RawMatch records sorted ascending by descriptor distance. A
    nearest neighbor whose second-nearest distance is (numerically) zero is
    rejected as ambiguous.
    """
    a = np.asarray(desc_a, dtype=np.float64)
    b = np.asarray(desc_b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return []
    d2 = (
        np.sum(a**2, axis=1)[:, None]
        + np.sum(b**2, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    np.clip(d2, 0.0, None, out=d2)

    def nearest_two(dist2):
        order = np.argsort(dist2, axis=1)
        first = order[:, 0]
        second_d = (
            dist2[np.arange(dist2.shape[0]), order[:, 1]]
            if dist2.shape[1] > 1
            else np.full(dist2.shape[0], np.inf)
        )
        first_d = dist2[np.arange(dist2.shape[0]), first]
        return first, np.sqrt(first_d), np.sqrt(second_d)

    nn_ab, d_ab, d2_ab = nearest_two(d2)
    nn_ba, d_ba, d2_ba = nearest_two(d2.T)

    matches = []
    for i in range(a.shape[0]):
        j = int(nn_ab[i])
        if int(nn_ba[j]) != i:
            continue
        if d2_ab[i] <= 1e-6 or d2_ba[j] <= 1e-6:
            continue  # ambiguous: effectively duplicate descriptors
        if d_ab[i] >= ratio * d2_ab[i] or d_ba[j] >= ratio * d2_ba[j]:
            continue
        # Exact distance; the quadratic expansion above loses precision near 0.
        matches.append(RawMatch(i, j, float(np.linalg.norm(a[i] - b[j]))))
    matches.sort(key=lambda m: (m.distance, m.index_a, m.index_b))
    return matches


class KeypointDetector:
    """Interface: detect(frame, intrinsics) -> list[Keypoint]."""

    def detect(self, frame: RgbdFrame, intrinsics: Intrinsics):
        raise NotImplementedError


class ScaleSpaceDetector(KeypointDetector):
    """Difference-of-Gaussian blob detector with gradient-histogram descriptors.

    The contrast threshold adapts per frame: all extrema above a weak base
    threshold are scored and the strongest ``target_count`` survive, which
    keeps the feature density near the target on textured scenes.
    """

    def __init__(
        self,
        target_count: int = 150,
        octaves: int = 3,
        base_sigma: float = 1.6,
        base_contrast: float = 0.004,
        edge_ratio: float = 10.0,
    ):
        self.target_count = target_count
        self.octaves = octaves
        self.base_sigma = base_sigma
        self.base_contrast = base_contrast
        self.edge_ratio = edge_ratio
        self._scales_per_octave = 3

    def detect(self, frame: RgbdFrame, intrinsics: Intrinsics):
        gray = frame.luminance().astype(np.float32)
        k = 2.0 ** (1.0 / self._scales_per_octave)
        sigmas = [self.base_sigma * k**i for i in range(self._scales_per_octave + 3)]

        candidates = []  # (response, octave, level, y, x)
        pyramids = []  # per octave: list of gaussian levels
        image = gray
        for octave in range(self.octaves):
            if min(image.shape) < 16:
                break
            gaussians = [ndimage.gaussian_filter(image, s) for s in sigmas]
            pyramids.append(gaussians)
            dogs = np.stack([gaussians[i + 1] - gaussians[i] for i in range(len(sigmas) - 1)])
            self._collect_extrema(dogs, octave, candidates)
            image = gaussians[self._scales_per_octave][::2, ::2]

        if not candidates:
            return []
        candidates.sort(key=lambda c: (-c[0], c[1], c[2], c[3], c[4]))

        keypoints = []
        grad_cache = {}
        for response, octave, level, y, x in candidates:
            if len(keypoints) >= self.target_count:
                break
            step = 2**octave
            x_full, y_full = x * step, y * step
            if not (
                0 <= x_full < frame.depth.shape[1] and 0 <= y_full < frame.depth.shape[0]
            ):
                continue
            depth = float(frame.depth[y_full, x_full])
            if depth <= 0.0:
                continue
            sigma_local = sigmas[level]
            key = (octave, level)
            if key not in grad_cache:
                g = pyramids[octave][level]
                gx = np.zeros_like(g)
                gy = np.zeros_like(g)
                gx[:, 1:-1] = 0.5 * (g[:, 2:] - g[:, :-2])
                gy[1:-1, :] = 0.5 * (g[2:, :] - g[:-2, :])
                grad_cache[key] = (gx, gy)
            gx, gy = grad_cache[key]
            orientation = self._dominant_orientation(gx, gy, x, y, sigma_local)
            descriptor = self._descriptor(gx, gy, x, y, sigma_local, orientation)
            if descriptor is None:
                continue
            pixel = np.array([float(x_full), float(y_full)])
            point_cam = intrinsics.unproject(pixel, depth)
            keypoints.append(
                Keypoint(
                    pixel=pixel,
                    depth=depth,
                    point_cam=point_cam,
                    scale=sigma_local * step,
                    orientation=orientation,
                    descriptor=descriptor,
                )
            )
        return keypoints

    def _collect_extrema(self, dogs, octave, out):
        for level in range(1, dogs.shape[0] - 1):
            trio = dogs[level - 1 : level + 2]
            center = trio[1]
            is_max = (center == ndimage.maximum_filter(trio, size=3)[1]) & (
                center > self.base_contrast
            )
            is_min = (center == ndimage.minimum_filter(trio, size=3)[1]) & (
                center < -self.base_contrast
            )
            ys, xs = np.nonzero(is_max | is_min)
            border = 8
            h, w = center.shape
            keep = (ys >= border) & (ys < h - border) & (xs >= border) & (xs < w - border)
            ys, xs = ys[keep], xs[keep]
            if ys.size == 0:
                continue
            # Reject edge-like responses via the 2x2 spatial Hessian.
            dxx = center[ys, xs + 1] + center[ys, xs - 1] - 2 * center[ys, xs]
            dyy = center[ys + 1, xs] + center[ys - 1, xs] - 2 * center[ys, xs]
            dxy = 0.25 * (
                center[ys + 1, xs + 1]
                - center[ys + 1, xs - 1]
                - center[ys - 1, xs + 1]
                + center[ys - 1, xs - 1]
            )
            tr = dxx + dyy
            det = dxx * dyy - dxy * dxy
            r = self.edge_ratio
            ok = (det > 0) & (tr * tr * r < det * (r + 1) ** 2)
            for y, x in zip(ys[ok], xs[ok]):
                # Detection level index within the octave stack equals the DoG
                # index here, so sigma lookup uses `level` directly.
                out.append((abs(float(center[y, x])), octave, level, int(y), int(x)))

    def _dominant_orientation(self, gx, gy, x, y, sigma):
        radius = max(3, int(round(4.0 * sigma)))
        h, w = gx.shape
        x0, x1 = max(0, x - radius), min(w, x + radius + 1)
        y0, y1 = max(0, y - radius), min(h, y + radius + 1)
        px = gx[y0:y1, x0:x1]
        py = gy[y0:y1, x0:x1]
        mag = np.hypot(px, py)
        ang = np.arctan2(py, px)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        weight = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * (1.5 * sigma) ** 2))
        hist = np.zeros(36)
        bins = ((ang + np.pi) / (2 * np.pi) * 36).astype(int) % 36
        np.add.at(hist, bins.ravel(), (mag * weight).ravel())
        hist = np.convolve(np.r_[hist[-2:], hist, hist[:2]], np.ones(5) / 5, "valid")
        peak = int(np.argmax(hist))
        return (peak + 0.5) / 36 * 2 * np.pi - np.pi

    def _descriptor(self, gx, gy, x, y, sigma, orientation):
        spacing = sigma
        grid = np.arange(16) - 7.5
        u, v = np.meshgrid(grid, grid)
        cos_o, sin_o = np.cos(orientation), np.sin(orientation)
        sample_x = x + spacing * (cos_o * u - sin_o * v)
        sample_y = y + spacing * (sin_o * u + cos_o * v)
        h, w = gx.shape
        inside = (sample_x >= 1) & (sample_x < w - 1) & (sample_y >= 1) & (sample_y < h - 1)
        if np.count_nonzero(inside) < 128:
            return None
        coords = np.stack([sample_y.ravel(), sample_x.ravel()])
        sx = ndimage.map_coordinates(gx, coords, order=1, mode="nearest").reshape(16, 16)
        sy = ndimage.map_coordinates(gy, coords, order=1, mode="nearest").reshape(16, 16)
        # Rotate gradients into the keypoint frame.
        rx = cos_o * sx + sin_o * sy
        ry = -sin_o * sx + cos_o * sy
        mag = np.hypot(rx, ry) * np.exp(-(u**2 + v**2) / (2 * 8.0**2)) * inside
        ang = np.arctan2(ry, rx)

        cell_u = (u + 8.0) // 4
        cell_v = (v + 8.0) // 4
        cell = (cell_v * 4 + cell_u).astype(int)
        # Soft-assign over the two nearest orientation bins.
        pos = (ang + np.pi) / (2 * np.pi) * 8.0 - 0.5
        b0 = np.floor(pos).astype(int) % 8
        b1 = (b0 + 1) % 8
        w1 = pos - np.floor(pos)
        hist = np.zeros(128)
        np.add.at(hist, cell.ravel() * 8 + b0.ravel(), (mag * (1 - w1)).ravel())
        np.add.at(hist, cell.ravel() * 8 + b1.ravel(), (mag * w1).ravel())
        norm = np.linalg.norm(hist)
        if norm < 1e-12:
            return None
        hist /= norm
        np.clip(hist, 0.0, 0.2, out=hist)
        hist /= np.linalg.norm(hist)
        return hist.astype(np.float32)


_BINARY_MAGIC = b"SFKP"
_RECORD = struct.Struct("<i5f" + f"{DESCRIPTOR_DIM}f")


class PrecomputedDetector(KeypointDetector):
    """Replays keypoints loaded from a keypoint file (binary or text)."""

    def __init__(self, path):
        self.by_frame = load_keypoints(path)

    def detect(self, frame: RgbdFrame, intrinsics: Intrinsics):
        keypoints = []
        for rec in self.by_frame.get(frame.index, []):
            pixel, depth, scale, orientation, descriptor = rec
            keypoints.append(
                Keypoint(
                    pixel=pixel,
                    depth=depth,
                    point_cam=intrinsics.unproject(pixel, depth),
                    scale=scale,
                    orientation=orientation,
                    descriptor=descriptor,
                )
            )
        return keypoints


def save_keypoints(path, keypoints_by_frame, binary: bool = True):
    """Write keypoints to the interchange format.

    Binary layout (little endian): magic ``SFKP``, uint32 version (1),
    uint32 descriptor dim, uint64 record count, then per record
    int32 frame, float32 x, y, depth, scale, orientation and the descriptor
    floats. The text variant holds the same fields whitespace-separated, one
    record per line; ``#`` starts a comment.
    """
    records = []
    for frame_index in sorted(keypoints_by_frame):
        for kp in keypoints_by_frame[frame_index]:
            records.append((frame_index, kp))
    if binary:
        with open(path, "wb") as fh:
            fh.write(_BINARY_MAGIC)
            fh.write(struct.pack("<IIQ", 1, DESCRIPTOR_DIM, len(records)))
            for frame_index, kp in records:
                fh.write(
                    _RECORD.pack(
                        frame_index,
                        float(kp.pixel[0]),
                        float(kp.pixel[1]),
                        float(kp.depth),
                        float(kp.scale),
                        float(kp.orientation),
                        *np.asarray(kp.descriptor, dtype=np.float32),
                    )
                )
    else:
        with open(path, "w") as fh:
            fh.write("# frame x y depth scale orientation descriptor[128]\n")
            for frame_index, kp in records:
                desc = " ".join(f"{d:.8g}" for d in np.asarray(kp.descriptor))
                fh.write(
                    f"{frame_index} {kp.pixel[0]:.4f} {kp.pixel[1]:.4f} "
                    f"{kp.depth:.6f} {kp.scale:.4f} {kp.orientation:.6f} {desc}\n"
                )


def load_keypoints(path):
    """Load a keypoint file; returns {frame_index: [(pixel, depth, scale, orientation, descriptor)]}."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == _BINARY_MAGIC:
        return _load_binary(path)
    return _load_text(path)


def _load_binary(path):
    by_frame = {}
    with open(path, "rb") as fh:
        fh.read(4)
        version, dim, count = struct.unpack("<IIQ", fh.read(16))
        if version != 1 or dim != DESCRIPTOR_DIM:
            raise ValueError(f"unsupported keypoint file (version {version}, dim {dim})")
        for _ in range(count):
            fields = _RECORD.unpack(fh.read(_RECORD.size))
            _append_record(by_frame, fields)
    return by_frame


def _load_text(path):
    by_frame = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 6 + DESCRIPTOR_DIM:
                raise ValueError(f"{path}:{line_no}: expected {6 + DESCRIPTOR_DIM} fields")
            fields = [int(parts[0])] + [float(p) for p in parts[1:]]
            _append_record(by_frame, fields)
    return by_frame


def _append_record(by_frame, fields):
    frame_index = int(fields[0])
    x, y, depth, scale, orientation = fields[1:6]
    descriptor = np.asarray(fields[6:], dtype=np.float32)
    norm = np.linalg.norm(descriptor)
    if norm > 0:
        descriptor = descriptor / norm
    by_frame.setdefault(frame_index, []).append(
        (np.array([x, y]), float(depth), float(scale), float(orientation), descriptor)
    )
