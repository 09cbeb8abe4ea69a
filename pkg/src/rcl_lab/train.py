"""Crop sampling, batch construction, pre-training loops, and fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor
from .losses import (
    DistanceSpec,
    consistency_loss,
    contrastive_loss,
    distance_eval_count,
    jdd_consistency_loss,
    n2n_loss,
    n2s_masked_loss,
    residual,
    total_loss,
)
from .models import Adam, FeatureEncoder, ModelParams, RestorerNet, build_net
from .noise import NoiseParams, NoiseRange, DEFAULT_NOISE_RANGE, apply_nlf_noise, \
    gen_procedural_image, mosaic, sample_nlf_params


class ImageTooSmallError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


PRETRAIN_MODES = ("rcl", "n2n", "n2s", "consistency-only")


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 8          # N+1 positive pairs per batch
    crop: int = 32
    steps: int = 2000
    tau: float = 0.5
    alpha: float = 1e-3
    distance: str = "emd"
    distance_scale: float = 100.0
    lr: float = 1e-3
    overlap_min: float = 0.25
    mode: str = "rcl"
    arch: str = "unet-small"
    head: str = "identity"
    domain: str = "rgb"          # rgb | raw
    finetune_steps: int = 300

    def __post_init__(self):
        if self.crop % 4:
            raise ValueError("crop size must be divisible by 4")
        if not (0 <= self.overlap_min < 1):
            raise ValueError("overlap_min must lie in [0, 1)")
        if self.batch_size < 2:
            raise ValueError("batch size must provide at least one negative")
        if self.domain not in ("rgb", "raw"):
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.domain == "raw" and self.arch == "dncnn-small":
            raise ValueError("raw domain requires a reconstruction network")

    def distance_spec(self) -> DistanceSpec:
        return DistanceSpec(self.distance, self.distance_scale)


# -- dataset -----------------------------------------------------------------


@dataclass
class DatasetEntry:
    clean: np.ndarray            # (H,W,3), values in [0,1]
    params: NoiseParams
    noise_seed: int
    noisy: np.ndarray


@dataclass
class Dataset:
    entries: list[DatasetEntry] = field(default_factory=list)
    noise_range: NoiseRange = DEFAULT_NOISE_RANGE

    def __len__(self):
        return len(self.entries)

    @staticmethod
    def synthesize(count: int, size: int, noise_range: NoiseRange,
                   seed: int) -> "Dataset":
        """Procedural corpus with one NoiseParams per image; fully seeded."""
        ds = Dataset(noise_range=noise_range)
        for i in range(count):
            clean = gen_procedural_image(seed * 100003 + i, size, size)
            p = sample_nlf_params(noise_range, np.random.default_rng([seed, i, 1]))
            noise_seed = seed * 1000003 + i
            noisy = apply_nlf_noise(clean, p, np.random.default_rng(noise_seed))
            ds.entries.append(DatasetEntry(clean, p, noise_seed, noisy))
        return ds


# -- crop sampling -----------------------------------------------------------


def _crop_origin(h: int, w: int, crop: int, rng, align: int = 1):
    y = int(rng.integers(0, (h - crop) // align + 1)) * align
    x = int(rng.integers(0, (w - crop) // align + 1)) * align
    return y, x


def overlap_fraction(a, b, crop: int) -> float:
    dy = abs(a[0] - b[0])
    dx = abs(a[1] - b[1])
    return max(0, crop - dy) * max(0, crop - dx) / float(crop * crop)


def sample_positive_boxes(h: int, w: int, crop: int, overlap_min: float,
                          rng, align: int = 1):
    """Two crop origins from one image whose overlap is at least the
    requested fraction of the crop area."""
    if h < crop or w < crop:
        raise ImageTooSmallError(f"image {h}x{w} smaller than crop {crop}")
    if not (0 <= overlap_min < 1):
        raise ValueError("overlap_min must lie in [0, 1)")
    a = _crop_origin(h, w, crop, rng, align)
    for _ in range(1000):
        b = _crop_origin(h, w, crop, rng, align)
        if overlap_fraction(a, b, crop) >= overlap_min:
            return a, b
    return a, a  # degenerate geometry: fall back to identical crops


def sample_positive_pair(image: np.ndarray, crop: int, overlap_min: float, rng):
    """Two overlapping (crop,crop,...) views of one image."""
    h, w = image.shape[:2]
    a, b = sample_positive_boxes(h, w, crop, overlap_min, rng)
    return (image[a[0]:a[0] + crop, a[1]:a[1] + crop],
            image[b[0]:b[0] + crop, b[1]:b[1] + crop])


# -- batches -----------------------------------------------------------------


@dataclass
class TrainBatch:
    """N+1 positive crop pairs; each pair carries its instance id."""

    pairs: list  # (crop_a, crop_b, instance_id) with channel-last crops
    crop: int

    @property
    def n_negatives(self) -> int:
        return len(self.pairs) - 1

    def validate(self) -> None:
        ids = [p[2] for p in self.pairs]
        if len(set(ids)) != len(ids):
            raise ValueError("batch instance ids must be distinct")


def _nhwc(img: np.ndarray) -> np.ndarray:
    """Lift an (H,W) or (H,W,C) crop to a single-image NHWC batch."""
    if img.ndim == 2:
        img = img[:, :, None]
    return img[None]


def build_batch(dataset: Dataset, cfg: TrainConfig, rng) -> TrainBatch:
    if len(dataset) < cfg.batch_size:
        raise EmptyDatasetError(
            f"need {cfg.batch_size} instances, dataset has {len(dataset)}")
    idxs = rng.choice(len(dataset), size=cfg.batch_size, replace=False)
    align = 2 if cfg.domain == "raw" else 1
    pairs = []
    for i in idxs:
        src = dataset.entries[i].noisy
        img = mosaic(src) if cfg.domain == "raw" else src
        h, w = img.shape[:2]
        a, b = sample_positive_boxes(h, w, cfg.crop, cfg.overlap_min, rng, align)
        ca = img[a[0]:a[0] + cfg.crop, a[1]:a[1] + cfg.crop]
        cb = img[b[0]:b[0] + cfg.crop, b[1]:b[1] + cfg.crop]
        pairs.append((ca if ca.ndim == 3 else ca[:, :, None],
                      cb if cb.ndim == 3 else cb[:, :, None], int(i)))
    batch = TrainBatch(pairs, cfg.crop)
    batch.validate()
    return batch


# -- training steps ----------------------------------------------------------


def _residual_mode(net: RestorerNet, cfg: TrainConfig) -> str:
    if cfg.domain == "raw":
        return "mosaic"
    return "residual-net" if net.arch == "dncnn-small" else "direct"


def rcl_step(batch: TrainBatch, net: RestorerNet, enc: FeatureEncoder,
             cfg: TrainConfig):
    """One residual-contrastive training objective over a batch.

    Forwards all 2N+2 crops, builds one contrastive term per pair (the
    other pairs' second crops serve as negatives), averages the
    consistency loss over every crop, and backpropagates the combined
    objective. Returns (loss value, gradients, instrumentation counters).
    """
    mode = _residual_mode(net, cfg)
    spec = cfg.distance_spec()
    forwards_before = net.forward_count
    dists_before = distance_eval_count()

    net.params.zero_grads()
    # All 2N+2 crops go through the network as one batch; the forward
    # counter tracks images, so this still registers as 2N+2 passes.
    crops = [c for ca, cb, _ in batch.pairs for c in (ca, cb)]
    xb = Tensor(np.stack(crops))
    out = net.forward(xb)

    residuals_a, residuals_b, cons_terms = [], [], []
    for j, (ca, cb, inst) in enumerate(batch.pairs):
        for which in range(2):
            i = 2 * j + which
            x_i = Tensor(xb.data[i:i + 1])
            out_i = out[i:i + 1]
            res = residual(x_i, out_i, mode, source_id=inst, crop_id=which)
            (residuals_a if which == 0 else residuals_b).append(res)
            if cfg.domain == "raw":
                cons_terms.append(jdd_consistency_loss(x_i, out_i))
    if cfg.domain != "raw":
        recon = xb - out if mode == "residual-net" else out
        diff = enc.encode(xb) - enc.encode(recon)
        cons_terms.append(diff.square().sum(axis=1).mean())

    contrast_terms = []
    for j in range(len(batch.pairs)):
        negatives = [residuals_b[k] for k in range(len(batch.pairs)) if k != j]
        contrast_terms.append(
            contrastive_loss(residuals_a[j], residuals_b[j], negatives, spec,
                             cfg.tau))
    l_contrast = contrast_terms[0]
    for t in contrast_terms[1:]:
        l_contrast = l_contrast + t
    l_cons = cons_terms[0]
    for t in cons_terms[1:]:
        l_cons = l_cons + t
    l_cons = l_cons.scale(1.0 / len(cons_terms))

    loss = total_loss(l_contrast, l_cons, cfg.alpha)
    loss.backward()
    counts = {
        "net_forwards": net.forward_count - forwards_before,
        "distance_evals": distance_eval_count() - dists_before,
    }
    return float(loss.data), net.params.grads(), counts


def _n2n_step(dataset, net, cfg, rng):
    net.params.zero_grads()
    idxs = rng.choice(len(dataset), size=cfg.batch_size, replace=False)
    terms = []
    for i in idxs:
        e = dataset.entries[i]
        clean = e.clean
        h, w = clean.shape[:2]
        y0, x0 = _crop_origin(h, w, cfg.crop, rng)
        patch = clean[y0:y0 + cfg.crop, x0:x0 + cfg.crop]
        x1 = apply_nlf_noise(patch, e.params, rng)
        x2 = apply_nlf_noise(patch, e.params, rng)
        terms.append(n2n_loss(Tensor(_nhwc(x1)), Tensor(_nhwc(x2)), net))
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    loss = loss.scale(1.0 / len(terms))
    loss.backward()
    return float(loss.data), net.params.grads()


def _n2s_step(dataset, net, cfg, rng, step: int):
    net.params.zero_grads()
    idxs = rng.choice(len(dataset), size=cfg.batch_size, replace=False)
    terms = []
    for i in idxs:
        noisy = dataset.entries[i].noisy
        h, w = noisy.shape[:2]
        y0, x0 = _crop_origin(h, w, cfg.crop, rng)
        patch = noisy[y0:y0 + cfg.crop, x0:x0 + cfg.crop]
        terms.append(n2s_masked_loss(patch, net, phase=step % 4))
    loss = terms[0]
    for t in terms[1:]:
        loss = loss + t
    loss = loss.scale(1.0 / len(terms))
    loss.backward()
    return float(loss.data), net.params.grads()


# -- loops -------------------------------------------------------------------


def _build_training_net(cfg: TrainConfig,
                        params: ModelParams | None = None) -> RestorerNet:
    in_ch = 1 if cfg.domain == "raw" else 3
    out_ch = 3
    return build_net(cfg.arch, in_ch, out_ch, cfg.head, cfg.seed, params)


def pretrain(dataset: Dataset, cfg: TrainConfig):
    """Run the configured self-supervised mode; returns (params, loss log)."""
    if len(dataset) == 0:
        raise EmptyDatasetError("pretrain needs a nonempty dataset")
    if cfg.mode not in PRETRAIN_MODES:
        raise ValueError(f"unknown pretrain mode {cfg.mode!r}")
    if cfg.mode == "consistency-only":
        cfg = replace(cfg, mode="rcl", alpha=0.0)
    net = _build_training_net(cfg)
    enc = FeatureEncoder(cfg.seed)
    opt = Adam(net.params, lr=cfg.lr)
    losses = []
    for step in range(cfg.steps):
        rng = np.random.default_rng([cfg.seed, 7, step])
        if cfg.mode == "rcl":
            batch = build_batch(dataset, cfg, rng)
            loss, grads, _ = rcl_step(batch, net, enc, cfg)
        elif cfg.mode == "n2n":
            loss, grads = _n2n_step(dataset, net, cfg, rng)
        else:
            loss, grads = _n2s_step(dataset, net, cfg, rng, step)
        opt.step(grads)
        losses.append(loss)
    return net.params, losses


def _aligned_crop(inp, tgt, crop, rng):
    scale = tgt.shape[0] // inp.shape[0]
    h, w = inp.shape[:2]
    y0, x0 = _crop_origin(h, w, crop, rng)
    ci = inp[y0:y0 + crop, x0:x0 + crop]
    s = scale
    ct = tgt[y0 * s:(y0 + crop) * s, x0 * s:(x0 + crop) * s]
    return ci, ct


def finetune(params: ModelParams, labeled_set, cfg: TrainConfig,
             freeze_all_but_last: bool) -> ModelParams:
    """Supervised L1 fine-tuning, swapping in a fresh task head if needed.

    ``labeled_set`` holds (input, target) channel-last image pairs; the
    target may be 2x the input resolution (upsampling head). The head is
    replaced only when the task calls for a different head shape than the
    pre-trained one; for a matching task (e.g. denoise after an RCL
    pre-train) the trained head is kept and refined. With the freeze flag
    set only the head tensors change.
    """
    tuned = params.copy()
    arch = "unet-small" if "enc1a.w" in tuned else "dncnn-small"
    first = "enc1a.w" if arch == "unet-small" else "blk0.w"
    in_ch = tuned[first].data.shape[2]
    out_ch = labeled_set[0][1].shape[-1] if labeled_set else 3
    net = build_net(arch, in_ch, out_ch, cfg.head, cfg.seed, tuned)
    k = 1 if (arch == "unet-small" and cfg.head == "identity") else 3
    needed = (k, k, net._head_in_channels, out_ch)
    if tuned["head.w"].data.shape != needed:
        net.replace_head(out_ch, cfg.head, seed=cfg.seed + 0x51)
    if freeze_all_but_last:
        tuned.freeze_all_but("head.")
    else:
        for e in tuned.entries:
            tuned.set_trainable(e.name, True)
    if not labeled_set:
        return tuned
    opt = Adam(tuned, lr=cfg.lr)
    bsz = min(cfg.batch_size, len(labeled_set))
    for step in range(cfg.finetune_steps):
        rng = np.random.default_rng([cfg.seed, 11, step])
        idxs = rng.choice(len(labeled_set), size=bsz, replace=False)
        tuned.zero_grads()
        terms = []
        for i in idxs:
            inp, tgt = labeled_set[i]
            ci, ct = _aligned_crop(inp, tgt, cfg.crop, rng)
            recon = net.reconstruction(Tensor(_nhwc(ci)))
            terms.append((Tensor(_nhwc(ct)) - recon).abs().mean())
        loss = terms[0]
        for t in terms[1:]:
            loss = loss + t
        loss = loss.scale(1.0 / len(terms))
        loss.backward()
        opt.step(tuned.grads())
    return tuned


def train_supervised(labeled_set, cfg: TrainConfig) -> ModelParams:
    """Supervised training from random init (no pre-trained weights)."""
    net = _build_training_net(cfg)
    return finetune(net.params, labeled_set, cfg, freeze_all_but_last=False)
