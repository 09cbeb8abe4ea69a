"""Training objectives: residual extraction, distribution distances, the
residual-contrastive loss, consistency losses, and the self-supervised
baseline losses. All return scalar graph nodes unless stated otherwise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeMismatchError, Tensor
from .models import FeatureEncoder
from .noise import bayer_masks


class SampleCountMismatchError(ValueError):
    pass


class ZeroVarianceError(ValueError):
    pass


class EmptyNegativesError(ValueError):
    pass


# Instrumentation: number of distance graph constructions since reset.
_distance_evals = 0


def distance_eval_count() -> int:
    return _distance_evals


def reset_distance_eval_count() -> None:
    global _distance_evals
    _distance_evals = 0


@dataclass
class Residual:
    """One crop's residual flattened to an empirical sample vector."""

    samples: Tensor
    source_id: int = -1
    crop_id: int = -1

    @property
    def count(self) -> int:
        return self.samples.data.size


def _mosaic_graph(rgb: Tensor) -> Tensor:
    """Differentiable RGGB mosaic of an (H,W,3) or (1,H,W,3) tensor."""
    t = rgb
    if t.data.ndim == 4:
        if t.data.shape[0] != 1:
            raise ShapeMismatchError("mosaic graph expects a single image")
        t = t.reshape(t.data.shape[1:])
    if t.data.ndim != 3 or t.data.shape[2] != 3:
        raise ShapeMismatchError(f"mosaic graph expects (H,W,3), got {t.shape}")
    h, w, _ = t.data.shape
    masks = np.stack([m.astype(np.float64) for m in bayer_masks(h, w)], axis=2)
    return (t * Tensor(masks)).sum(axis=2)


def _flatten_image(t: Tensor) -> Tensor:
    return t.reshape((t.data.size,))


def residual(x: Tensor, f_out: Tensor, mode: str = "direct",
             source_id: int = -1, crop_id: int = -1) -> Residual:
    """Build the flattened residual sample vector for one crop.

    direct:       x - f_out            (network predicts the reconstruction)
    residual-net: f_out                (network predicts the residual itself)
    mosaic:       x - mosaic(f_out)    (single-plane raw x, RGB f_out)
    """
    if mode == "direct":
        if x.data.shape != f_out.data.shape:
            raise ShapeMismatchError(
                f"direct residual shape mismatch: {x.shape} vs {f_out.shape}")
        r = x - f_out
    elif mode == "residual-net":
        r = f_out
    elif mode == "mosaic":
        raw = x.data
        if raw.ndim == 4:
            raw = raw[0]
        if raw.ndim == 3 and raw.shape[2] == 1:
            raw = raw[..., 0]
        if raw.ndim != 2:
            raise ShapeMismatchError(f"mosaic residual needs raw (H,W) x, got {x.shape}")
        m = _mosaic_graph(f_out)
        if m.data.shape != raw.shape:
            raise ShapeMismatchError(
                f"mosaic residual spatial mismatch: {raw.shape} vs {m.data.shape}")
        xr = x.reshape(raw.shape) if x.data.ndim != 2 else x
        r = xr - m
    else:
        raise ValueError(f"unknown residual mode {mode!r}")
    return Residual(_flatten_image(r), source_id, crop_id)


# -- distribution distances --------------------------------------------------


def _samples(a) -> Tensor:
    return a.samples if isinstance(a, Residual) else Tensor._lift(a)


def emd(a, b) -> Tensor:
    """1-D Wasserstein-1 between empirical samples: mean |sorted gap|."""
    sa, sb = _samples(a), _samples(b)
    if sa.data.size != sb.data.size:
        raise SampleCountMismatchError(
            f"sample counts differ: {sa.data.size} vs {sb.data.size}")
    return (sa.sort() - sb.sort()).abs().mean()


def bd(a, b) -> Tensor:
    """Closed-form Gaussian Bhattacharyya distance from sample moments.

    Moments are graph nodes, so gradients flow through mean and variance.
    """
    sa, sb = _samples(a), _samples(b)
    for s in (sa, sb):
        if s.data.size < 2:
            raise SampleCountMismatchError("bd needs at least 2 samples per side")
    mu_p, var_p = _moments(sa)
    mu_q, var_q = _moments(sb)
    if float(var_p.data) <= 0 or float(var_q.data) <= 0:
        raise ZeroVarianceError("bd is undefined for constant residuals")
    # Ratios via exp/log keep everything inside the op vocabulary.
    log_p, log_q = var_p.log(), var_q.log()
    ratio = (log_p - log_q).exp() + (log_q - log_p).exp() + Tensor(2.0)
    term1 = ratio.scale(0.25).log().scale(0.25)
    inv_sum = (var_p + var_q).log().scale(-1.0).exp()
    term2 = ((mu_p - mu_q).square() * inv_sum).scale(0.25)
    return term1 + term2


def _moments(s: Tensor):
    mu = s.mean()
    var = (s - mu).square().mean()
    return mu, var


def mmd(a, b, max_samples: int = 256, bandwidth_floor: float = 1e-6,
        bandwidth: float | None = None) -> Tensor:
    """Squared-MMD V-statistic with a Gaussian kernel.

    Bandwidth defaults to the median pairwise distance of the pooled samples
    (median heuristic, treated as a constant; pass ``bandwidth`` to pin it,
    e.g. for finite-difference checks). Inputs are subsampled to at most
    ``max_samples`` elements each with a fixed seed.
    """
    sa, sb = _samples(a), _samples(b)
    if sa.data.size != sb.data.size:
        raise SampleCountMismatchError(
            f"sample counts differ: {sa.data.size} vs {sb.data.size}")
    n = sa.data.size
    if n > max_samples:
        rng = np.random.default_rng(0xC0FFEE)
        idx_a = np.sort(rng.choice(n, size=max_samples, replace=False))
        idx_b = np.sort(rng.choice(n, size=max_samples, replace=False))
        sa = sa.reshape((n,))[idx_a]
        sb = sb.reshape((n,))[idx_b]
        n = max_samples
    if bandwidth is None:
        pooled = np.concatenate([sa.data.ravel(), sb.data.ravel()])
        dists = np.abs(pooled[:, None] - pooled[None, :])
        h = max(float(np.median(dists)), bandwidth_floor)
    else:
        h = max(float(bandwidth), bandwidth_floor)
    coef = -1.0 / (2.0 * h * h)
    col_a = sa.reshape((n, 1))
    col_b = sb.reshape((n, 1))
    row_a = sa.reshape((1, n))
    row_b = sb.reshape((1, n))
    k_aa = (col_a - row_a).square().scale(coef).exp().mean()
    k_bb = (col_b - row_b).square().scale(coef).exp().mean()
    k_ab = (col_a - row_b).square().scale(coef).exp().mean()
    return k_aa + k_bb - k_ab.scale(2.0)


@dataclass(frozen=True)
class DistanceSpec:
    """Which statistical distance to use and how to scale it."""

    kind: str = "emd"  # emd | bd | mmd
    scale: float = 100.0
    mmd_max_samples: int = 256

    def __post_init__(self):
        if self.kind not in ("emd", "bd", "mmd"):
            raise ValueError(f"unknown distance kind {self.kind!r}")
        if self.scale <= 0:
            raise ValueError("distance scale must be positive")


def distance(a, b, spec: DistanceSpec) -> Tensor:
    global _distance_evals
    _distance_evals += 1
    if spec.kind == "emd":
        return emd(a, b)
    if spec.kind == "bd":
        return bd(a, b)
    return mmd(a, b, spec.mmd_max_samples)


# -- contrastive / consistency objectives ------------------------------------


def contrastive_loss(query, positive, negatives, spec: DistanceSpec,
                     tau: float) -> Tensor:
    """Softmax contrast of scaled distances: small d(query, positive) and
    large d(query, negative) drive the loss toward zero."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    if not negatives:
        raise EmptyNegativesError("contrastive loss needs at least one negative")
    inv_tau = spec.scale / tau
    logit_pos = distance(query, positive, spec).scale(-inv_tau)
    logits = [logit_pos.reshape((1,))]
    for neg in negatives:
        logits.append(distance(query, neg, spec).scale(-inv_tau).reshape((1,)))
    lse = Tensor.concat(logits, axis=0).logsumexp()
    return lse - logit_pos


def consistency_loss(x: Tensor, f_out: Tensor, enc: FeatureEncoder) -> Tensor:
    """Squared L2 gap between encoder features of input and reconstruction."""
    if x.data.shape != f_out.data.shape:
        raise ShapeMismatchError(
            f"consistency shape mismatch: {x.shape} vs {f_out.shape}")
    xa = x if x.data.ndim == 4 else x.reshape((1,) + x.data.shape)
    fa = f_out if f_out.data.ndim == 4 else f_out.reshape((1,) + f_out.data.shape)
    diff = enc.encode(xa) - enc.encode(fa)
    return diff.square().sum()


def jdd_consistency_loss(x_raw: Tensor, f_out_rgb: Tensor) -> Tensor:
    """Mean absolute gap between the raw input and the re-mosaiced output."""
    raw_shape = x_raw.data.shape
    if len(raw_shape) == 4:
        raw_shape = raw_shape[1:3]
    elif len(raw_shape) == 3:
        raw_shape = raw_shape[:2]
    m = _mosaic_graph(f_out_rgb)
    if m.data.shape != raw_shape:
        raise ShapeMismatchError(
            f"jdd consistency spatial mismatch: {raw_shape} vs {m.data.shape}")
    return (x_raw.reshape(raw_shape) - m).abs().mean()


def total_loss(contrastive: Tensor, consistency: Tensor, alpha: float) -> Tensor:
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    return contrastive.scale(alpha) + consistency


# -- baseline objectives -----------------------------------------------------


def n2n_loss(x1: Tensor, x2: Tensor, net) -> Tensor:
    """Mean absolute gap between one noisy view and the reconstruction of
    the paired view."""
    if x1.data.shape != x2.data.shape:
        raise ShapeMismatchError(f"n2n shape mismatch: {x1.shape} vs {x2.shape}")
    return (x2 - net.reconstruction(x1)).abs().mean()


def n2s_mask(h: int, w: int, phase: int) -> np.ndarray:
    """Boolean grid mask selecting one of four 2x2 phases (25% of pixels)."""
    phase = phase % 4
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    return (rows % 2 == phase // 2) & (cols % 2 == phase % 2)


def neighbor_average_infill(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace masked pixels by the average of their available 4-neighbors."""
    h, w = img.shape[:2]
    acc = np.zeros_like(img)
    cnt = np.zeros((h, w) + (1,) * (img.ndim - 2))
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ys = slice(max(dy, 0), h + min(dy, 0))
        yd = slice(max(-dy, 0), h + min(-dy, 0))
        xs = slice(max(dx, 0), w + min(dx, 0))
        xd = slice(max(-dx, 0), w + min(-dx, 0))
        acc[yd, xd] += img[ys, xs]
        cnt[yd, xd] += 1
    out = img.copy()
    out[mask] = (acc / cnt)[mask]
    return out


def n2s_masked_loss(x: np.ndarray, net, phase: int) -> Tensor:
    """Masked self-prediction loss on one (H,W,C) noisy image.

    Masked pixels are infilled with their neighbor average on the input;
    the L1 loss is measured on the masked pixels only, against the
    original values.
    """
    h, w, c = x.shape
    mask = n2s_mask(h, w, phase)
    infilled = neighbor_average_infill(x, mask)
    inp = Tensor(infilled[None])
    recon = net.reconstruction(inp)
    target = Tensor(x[None])
    mask_t = Tensor(mask.astype(np.float64)[None, :, :, None])
    masked_err = ((recon - target) * mask_t).abs().sum()
    return masked_err.scale(1.0 / (mask.sum() * c))
