"""Bilinear image sampling with exact interpolant derivatives."""

from __future__ import annotations

import numpy as np


def _corner_indices(shape, x, y):
    h, w = shape[:2]
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x), w - 2).astype(int)
    y0 = np.minimum(np.floor(y), h - 2).astype(int)
    return x0, y0, x - x0, y - y0


def bilinear_sample(image, x, y):
    """Sample ``image`` (H, W) or (H, W, C) at continuous pixel coords (x, y)."""
    image = np.asarray(image)
    x0, y0, fx, fy = _corner_indices(image.shape, np.asarray(x, float), np.asarray(y, float))
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    v00 = image[y0, x0]
    v01 = image[y0, x0 + 1]
    v10 = image[y0 + 1, x0]
    v11 = image[y0 + 1, x0 + 1]
    return (
        v00 * (1 - fx) * (1 - fy)
        + v01 * fx * (1 - fy)
        + v10 * (1 - fx) * fy
        + v11 * fx * fy
    )


def bilinear_sample_with_grad(image, x, y):
    """Sample and return the exact derivative of the interpolant w.r.t. (x, y).

    Returns (value, d/dx, d/dy); each has the image's channel shape appended.
    """
    image = np.asarray(image)
    x0, y0, fx, fy = _corner_indices(image.shape, np.asarray(x, float), np.asarray(y, float))
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    v00 = image[y0, x0]
    v01 = image[y0, x0 + 1]
    v10 = image[y0 + 1, x0]
    v11 = image[y0 + 1, x0 + 1]
    value = (
        v00 * (1 - fx) * (1 - fy)
        + v01 * fx * (1 - fy)
        + v10 * (1 - fx) * fy
        + v11 * fx * fy
    )
    ddx = (v01 - v00) * (1 - fy) + (v11 - v10) * fy
    ddy = (v10 - v00) * (1 - fx) + (v11 - v01) * fx
    return value, ddx, ddy
