"""Deterministic stain-analysis procedures for deriving auxiliary targets.

Pixels are converted to optical density, unmixed against published stain
vectors, and reduced to two supervision maps: a Gaussian-smoothed
hematoxylin (nuclei) density and an Otsu-thresholded DAB membrane mask.
All functions are pure; identical inputs give bit-identical outputs.
"""
from __future__ import annotations

import math

import numpy as np

from .autodiff import InvalidArgumentError

# OD of the darkest representable 8-bit pixel: -log10(1/256).
OD_MAX = math.log10(256.0)


class InvalidStainMatrixError(ValueError):
    pass


class StainMatrix:
    """Three unit stain vectors in OD space, with a precomputed inverse.

    Rows are normalized at construction; a near-singular matrix is rejected.
    """

    def __init__(self, rows):
        rows = np.array(rows, dtype=np.float64)
        if rows.shape != (3, 3):
            raise InvalidStainMatrixError(f"expected 3x3 stain rows, got {rows.shape}")
        norms = np.linalg.norm(rows, axis=1)
        if np.any(norms < 1e-12):
            raise InvalidStainMatrixError("zero-length stain vector")
        self.rows = rows / norms[:, None]
        if abs(np.linalg.det(self.rows)) <= 1e-6:
            raise InvalidStainMatrixError("stain matrix is singular")
        self.inverse = np.linalg.inv(self.rows)


def _he_rows():
    h = np.array([0.650, 0.704, 0.286])
    e = np.array([0.072, 0.990, 0.105])
    residual = np.cross(h, e)
    return np.stack([h, e, residual / np.linalg.norm(residual)])


# Ruifrok-Johnston stain vectors.
HE_MATRIX = StainMatrix(_he_rows())
HED_MATRIX = StainMatrix([[0.650, 0.704, 0.286],
                          [0.072, 0.990, 0.105],
                          [0.268, 0.570, 0.776]])


def rgb_to_od(pixels: np.ndarray) -> np.ndarray:
    """Per-channel optical density: OD = -log10((I + 1) / 256)."""
    return -np.log10((np.asarray(pixels, dtype=np.float64) + 1.0) / 256.0)


def deconvolve(od: np.ndarray, matrix: StainMatrix) -> np.ndarray:
    """Unmix (..., 3) OD values into per-stain concentrations, clamped at 0."""
    conc = np.asarray(od, dtype=np.float64) @ matrix.inverse
    return np.maximum(conc, 0.0)


def _reflect_indices(n: int, radius: int) -> np.ndarray:
    # Mirror without repeating the edge sample; works for any radius.
    if n == 1:
        return np.zeros(n + 2 * radius, dtype=np.intp)
    idx = np.abs(np.arange(-radius, n + radius))
    period = 2 * (n - 1)
    idx %= period
    return np.where(idx >= n, period - idx, idx)


def gaussian_filter(values: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, truncated at radius ceil(3σ), reflect-padded."""
    if sigma <= 0:
        raise InvalidArgumentError(f"sigma must be positive, got {sigma}")
    values = np.asarray(values, dtype=np.float64)
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()

    out = values
    for axis in range(2):
        moved = np.moveaxis(out, axis, 0)
        padded = moved[_reflect_indices(moved.shape[0], radius)]
        win = np.lib.stride_tricks.sliding_window_view(padded, kernel.size, axis=0)
        moved = np.einsum("i...k,k->i...", win, kernel)
        out = np.moveaxis(moved, 0, axis)
    return out


def _check_grid(shape, grid: int):
    h, w = shape
    if grid < 1 or h % grid or w % grid:
        raise InvalidArgumentError(f"grid {grid} does not divide patch {h}x{w}")


def _pool(values: np.ndarray, grid: int, reducer) -> np.ndarray:
    h, w = values.shape
    blocks = values.reshape(grid, h // grid, grid, w // grid)
    return reducer(blocks, axis=(1, 3))


def hematoxylin_channel(pixels: np.ndarray, matrix: StainMatrix = HE_MATRIX) -> np.ndarray:
    return deconvolve(rgb_to_od(pixels), matrix)[..., 0]


def dab_channel(pixels: np.ndarray) -> np.ndarray:
    return deconvolve(rgb_to_od(pixels), HED_MATRIX)[..., 2]


def nuclei_density(pixels: np.ndarray, sigma: float = 2.0, grid: int = 8,
                   matrix: StainMatrix = HE_MATRIX) -> np.ndarray:
    """Smoothed hematoxylin concentration, mean-pooled to a grid×grid map."""
    _check_grid(pixels.shape[:2], grid)
    hema = hematoxylin_channel(pixels, matrix)
    return _pool(gaussian_filter(hema, sigma), grid, np.mean)


def otsu_threshold(histogram: np.ndarray) -> int:
    """Split index maximizing between-class variance on a 256-bin histogram.

    A threshold ``t`` separates bins [0, t) from [t, 255]; ties break toward
    the lower index. A histogram with all mass in one bin returns that bin.
    """
    hist = np.asarray(histogram, dtype=np.float64)
    if hist.shape != (256,):
        raise InvalidArgumentError(f"expected 256 bins, got {hist.shape}")
    cum = np.cumsum(hist)
    cums = np.cumsum(np.arange(256, dtype=np.float64) * hist)
    total = cum[-1]
    if total <= 0:
        raise InvalidArgumentError("histogram is empty")
    nonzero = np.nonzero(hist)[0]
    if nonzero.size == 1:
        return int(nonzero[0])
    w0 = cum[:-1]                      # class weight below threshold t = 1..255
    s0 = cums[:-1]
    w1 = total - w0
    s1 = cums[-1] - s0
    valid = (w0 > 0) & (w1 > 0)
    score = np.full(255, -1.0)
    mu0 = np.divide(s0, w0, out=np.zeros_like(s0), where=valid)
    mu1 = np.divide(s1, w1, out=np.zeros_like(s1), where=valid)
    diff = mu0 - mu1
    score[valid] = (w0 * w1 * diff * diff)[valid]
    return int(np.argmax(score)) + 1


def membrane_mask(pixels: np.ndarray, grid: int = 8) -> np.ndarray:
    """Binary DAB-positive mask, Otsu-thresholded then max-pooled to grid×grid.

    The DAB concentration is histogrammed over 256 bins spanning [0, OD_MAX];
    a channel that is single-valued or falls entirely within one bin yields an
    all-zero mask.
    """
    _check_grid(pixels.shape[:2], grid)
    dab = dab_channel(pixels)
    if dab.max() - dab.min() < 1e-12:
        return np.zeros((grid, grid), dtype=np.float64)
    bins = np.minimum((dab / OD_MAX * 256.0).astype(np.int64), 255)
    bins = np.maximum(bins, 0)
    hist = np.bincount(bins.reshape(-1), minlength=256).astype(np.float64)
    if np.count_nonzero(hist) == 1:
        return np.zeros((grid, grid), dtype=np.float64)
    t = otsu_threshold(hist)
    mask = (bins >= t).astype(np.float64)
    return _pool(mask, grid, np.max)
