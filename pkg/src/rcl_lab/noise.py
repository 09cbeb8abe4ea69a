"""Signal-dependent noise synthesis, Bayer mosaic ops, and procedural images.

Images are channel-last float64 arrays with intensities nominally in [0,1].
Noisy outputs are intentionally not clipped: clipping would distort the
Gaussian residual statistics the contrastive objective discriminates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d


class InvalidRangeError(ValueError):
    pass


class OddDimensionError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseParams:
    """Per-image heteroscedastic Gaussian noise level: var = shot*v + read."""

    lambda_shot: float
    lambda_read: float

    def __post_init__(self):
        if self.lambda_shot < 0 or self.lambda_read < 0:
            raise InvalidRangeError("noise parameters must be nonnegative")

    def variance(self, v):
        return self.lambda_shot * v + self.lambda_read


@dataclass(frozen=True)
class NoiseRange:
    """Overall noise strength range in normalized intensity units."""

    sigma_min: float
    sigma_max: float

    def __post_init__(self):
        if not (0 <= self.sigma_min <= self.sigma_max):
            raise InvalidRangeError(
                f"need 0 <= sigma_min <= sigma_max, got "
                f"({self.sigma_min}, {self.sigma_max})"
            )


# sigma in [0, 20] on the 8-bit scale, converted to normalized intensities
DEFAULT_NOISE_RANGE = NoiseRange(0.0, 20.0 / 255.0)


def sample_nlf_params(noise_range: NoiseRange, rng: np.random.Generator) -> NoiseParams:
    """Draw per-image (shot, read) variances; sqrt of each is uniform on
    [sigma_min/sqrt(2), sigma_max/sqrt(2)]."""
    # v ~ U(sigma_min, sigma_max), lambda = (v/sqrt(2))^2 = v^2/2; squaring
    # after the draw keeps the degenerate range case bit-exact.
    v_shot = rng.uniform(noise_range.sigma_min, noise_range.sigma_max)
    v_read = rng.uniform(noise_range.sigma_min, noise_range.sigma_max)
    return NoiseParams(v_shot * v_shot / 2.0, v_read * v_read / 2.0)


def apply_nlf_noise(y: np.ndarray, p: NoiseParams, rng: np.random.Generator) -> np.ndarray:
    """Add zero-mean Gaussian noise with per-pixel variance shot*y + read."""
    y = np.asarray(y, dtype=np.float64)
    std = np.sqrt(np.maximum(p.variance(y), 0.0))
    return y + rng.standard_normal(y.shape) * std


def make_noisy_pair(y, noise_range: NoiseRange, rng: np.random.Generator):
    """Two independent noisy realizations sharing one sampled NoiseParams."""
    p = sample_nlf_params(noise_range, rng)
    return apply_nlf_noise(y, p, rng), apply_nlf_noise(y, p, rng), p


# -- Bayer RGGB mosaic -------------------------------------------------------


def _check_even(h: int, w: int) -> None:
    if h % 2 or w % 2:
        raise OddDimensionError(f"mosaic ops need even dims, got {h}x{w}")


def bayer_masks(h: int, w: int):
    """Boolean (R, G, B) site masks for the RGGB pattern."""
    _check_even(h, w)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    r = (rows % 2 == 0) & (cols % 2 == 0)
    b = (rows % 2 == 1) & (cols % 2 == 1)
    g = ~(r | b)
    return r, g, b


def mosaic(rgb: np.ndarray) -> np.ndarray:
    """Subsample an (H,W,3) image onto a single-channel RGGB raw plane."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"mosaic expects (H,W,3), got {rgb.shape}")
    h, w, _ = rgb.shape
    r, g, b = bayer_masks(h, w)
    raw = np.where(r, rgb[:, :, 0], np.where(g, rgb[:, :, 1], rgb[:, :, 2]))
    return raw


# Bilinear interpolation stencils; normalized per pixel by the mask response
# so border pixels average only their available same-color neighbors.
_K_RB = np.array([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]])
_K_G = np.array([[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]])


def demosaic_bilinear(raw: np.ndarray) -> np.ndarray:
    """Fill missing RGGB colors by averaging nearest same-color neighbors."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 3 and raw.shape[2] == 1:
        raw = raw[:, :, 0]
    if raw.ndim != 2:
        raise ValueError(f"demosaic expects (H,W) raw, got {raw.shape}")
    h, w = raw.shape
    masks = bayer_masks(h, w)
    kernels = (_K_RB, _K_G, _K_RB)
    out = np.empty((h, w, 3))
    for c, (mask, k) in enumerate(zip(masks, kernels)):
        m = mask.astype(np.float64)
        num = convolve2d(raw * m, k, mode="same")
        den = convolve2d(m, k, mode="same")
        out[:, :, c] = num / den
    return out


# -- procedural clean images -------------------------------------------------


def _bilinear_resize(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    gh, gw = grid.shape[:2]
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    g = grid
    return ((1 - fy) * (1 - fx) * g[y0][:, x0]
            + (1 - fy) * fx * g[y0][:, x1]
            + fy * (1 - fx) * g[y1][:, x0]
            + fy * fx * g[y1][:, x1])


def gen_procedural_image(seed: int, h: int, w: int) -> np.ndarray:
    """Deterministic multi-scale smooth random field with a few rectangles.

    Same seed produces the same (H,W,3) image with values in [0,1].
    """
    if h < 16 or w < 16:
        raise ValueError(f"image must be at least 16x16, got {h}x{w}")
    rng = np.random.default_rng([seed, 0x1A])
    img = np.zeros((h, w, 3))
    for cells, weight in ((max(2, h // 16), 0.5), (max(3, h // 8), 0.3),
                          (max(5, h // 4), 0.2)):
        grid = rng.uniform(size=(cells, max(2, cells * w // h), 3))
        img += weight * _bilinear_resize(grid, h, w)
    for _ in range(int(rng.integers(2, 5))):
        y0 = int(rng.integers(0, h - 4))
        x0 = int(rng.integers(0, w - 4))
        y1 = int(rng.integers(y0 + 2, h))
        x1 = int(rng.integers(x0 + 2, w))
        color = rng.uniform(size=3)
        alpha = rng.uniform(0.3, 0.7)
        img[y0:y1, x0:x1] = (1 - alpha) * img[y0:y1, x0:x1] + alpha * color
    return np.clip(img, 0.0, 1.0)


def downsample2x(img: np.ndarray) -> np.ndarray:
    """2x2 average-pool of an (H,W,C) image (used to build SR inputs)."""
    h, w = img.shape[:2]
    _check_even(h, w)
    return img.reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))
