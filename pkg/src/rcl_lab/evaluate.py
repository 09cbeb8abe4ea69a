"""Image-quality metrics, the proxy-evaluation protocol, residual-density
analysis, and label-efficiency sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor
from .models import ModelParams, build_net
from .noise import downsample2x, mosaic
from .train import (
    Dataset,
    TrainConfig,
    _nhwc,
    finetune,
    pretrain,
    sample_positive_boxes,
    train_supervised,
)


class TaskHeadMismatchError(ValueError):
    pass


class InsufficientLabelsError(ValueError):
    pass


# -- metrics -----------------------------------------------------------------


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) in dB; +inf when the images are identical."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"psnr shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


_SSIM_WINDOW = 8
_SSIM_STRIDE = 4
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2
_SSIM_C3 = _SSIM_C2 / 2.0


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Mean luminance*contrast*structure over uniform 8x8 windows, stride 4.

    Color images are first reduced to grayscale by channel averaging.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 3:
        x = x.mean(axis=2)
        y = y.mean(axis=2)
    h, w = x.shape
    win, stride = _SSIM_WINDOW, _SSIM_STRIDE
    if h < win or w < win:
        raise ValueError(f"image {h}x{w} smaller than ssim window {win}")
    vals = []
    for i in range(0, h - win + 1, stride):
        for j in range(0, w - win + 1, stride):
            wx = x[i:i + win, j:j + win]
            wy = y[i:i + win, j:j + win]
            mx, my = wx.mean(), wy.mean()
            vx, vy = wx.var(), wy.var()
            sx, sy = math.sqrt(vx), math.sqrt(vy)
            cov = ((wx - mx) * (wy - my)).mean()
            lum = (2 * mx * my + _SSIM_C1) / (mx * mx + my * my + _SSIM_C1)
            con = (2 * sx * sy + _SSIM_C2) / (vx + vy + _SSIM_C2)
            struct = (cov + _SSIM_C3) / (sx * sy + _SSIM_C3)
            vals.append(lum * con * struct)
    return float(np.mean(vals))


# -- downstream task assembly ------------------------------------------------

TASKS = ("denoise", "sr2x", "jdensr2x", "jdd")


def task_pair(entry, task: str):
    """(input, target) channel-last images for one dataset entry."""
    if task == "denoise":
        return entry.noisy, entry.clean
    if task == "sr2x":
        return downsample2x(entry.clean), entry.clean
    if task == "jdensr2x":
        return downsample2x(entry.noisy), entry.clean
    if task == "jdd":
        return mosaic(entry.noisy)[:, :, None], entry.clean
    raise ValueError(f"unknown task {task!r}")


def task_head(task: str) -> str:
    return "upsample-2x" if task in ("sr2x", "jdensr2x") else "identity"


def _net_in_channels(params: ModelParams) -> int:
    first = "enc1a.w" if "enc1a.w" in params else "blk0.w"
    return params[first].data.shape[2]


def reconstruct_image(params: ModelParams, inp: np.ndarray, head: str,
                      out_channels: int = 3) -> np.ndarray:
    """Run a checkpoint on one channel-last image, returning channel-last."""
    arch = "unet-small" if "enc1a.w" in params else "dncnn-small"
    net = build_net(arch, _net_in_channels(params),
                    out_channels, head, 0, params)
    out = net.reconstruction(Tensor(_nhwc(inp)))
    return out.data[0]


# -- proxy evaluation --------------------------------------------------------


@dataclass
class TrialResult:
    seed: int
    trial: int
    psnr_values: list
    ssim_values: list

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr_values))

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim_values))


@dataclass
class MetricsReport:
    task: str
    method: str
    trials: list = field(default_factory=list)

    @property
    def psnr_mean(self) -> float:
        return float(np.mean([t.psnr_mean for t in self.trials]))

    @property
    def ssim_mean(self) -> float:
        return float(np.mean([t.ssim_mean for t in self.trials]))

    def csv_rows(self):
        rows = [("task", "method", "trial", "seed", "image", "psnr", "ssim")]
        for t in self.trials:
            for i, (p, s) in enumerate(zip(t.psnr_values, t.ssim_values)):
                rows.append((self.task, self.method, t.trial, t.seed, i,
                             _fmt(p), _fmt(s)))
            rows.append((self.task, self.method, t.trial, t.seed, "mean",
                         _fmt(t.psnr_mean), _fmt(t.ssim_mean)))
        rows.append((self.task, self.method, "mean", "", "",
                     _fmt(self.psnr_mean), _fmt(self.ssim_mean)))
        return rows


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.6f}"


def evaluate_params(params: ModelParams, test: Dataset, task: str,
                    head: str | None = None):
    """(psnr list, ssim list) of a checkpoint over a test set for one task."""
    head = head or task_head(task)
    psnrs, ssims = [], []
    for entry in test.entries:
        inp, tgt = task_pair(entry, task)
        recon = reconstruct_image(params, inp, head, tgt.shape[-1])
        psnrs.append(psnr(recon, tgt))
        ssims.append(ssim(recon, tgt))
    return psnrs, ssims


def proxy_evaluate(pretrained: ModelParams, task: str, labeled_train: Dataset,
                   test: Dataset, trials: int, cfg: TrainConfig,
                   method: str = "proxy") -> MetricsReport:
    """Frozen-body head fine-tuning per trial, scored with PSNR/SSIM.

    Each trial replaces the last layer with a fresh task head, freezes the
    rest, fine-tunes on the labeled set, and evaluates on the test set.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    in_ch = _net_in_channels(pretrained)
    if (task == "jdd") != (in_ch == 1):
        raise TaskHeadMismatchError(
            f"task {task!r} incompatible with a {in_ch}-channel-input checkpoint")
    head = task_head(task)
    labeled = [task_pair(e, task) for e in labeled_train.entries]
    report = MetricsReport(task=task, method=method)
    for trial in range(trials):
        tcfg = replace(cfg, seed=cfg.seed + trial, head=head)
        tuned = finetune(pretrained, labeled, tcfg, freeze_all_but_last=True)
        ps, ss = evaluate_params(tuned, test, task, head)
        report.trials.append(TrialResult(tcfg.seed, trial, ps, ss))
    return report


# -- residual density analysis -----------------------------------------------


@dataclass
class DensityRecord:
    """EMD(query, negative) - EMD(query, positive) per sampled triple."""

    values: list
    phase: str  # pre-training | post-training | true-noise

    @property
    def positive_fraction(self) -> float:
        if not self.values:
            return float("nan")
        return float(np.mean(np.asarray(self.values) > 0))

    def csv_rows(self):
        rows = [("phase", "triple", "emd_difference")]
        for i, v in enumerate(self.values):
            rows.append((self.phase, i, f"{v:.9f}"))
        return rows


def _emd_np(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.abs(np.sort(a.ravel()) - np.sort(b.ravel())).mean())


def density_analysis(params: ModelParams | None, dataset: Dataset,
                     n_triples: int, rng, phase: str,
                     crop: int = 32) -> DensityRecord:
    """Sample anchor/positive/negative crop triples and record EMD gaps.

    With ``params`` set, residuals come from the network reconstruction;
    otherwise the true injected noise (noisy - clean) is used.
    """
    values = []
    for _ in range(n_triples):
        i = int(rng.integers(0, len(dataset)))
        k = int(rng.integers(0, len(dataset) - 1))
        if k >= i:
            k += 1
        ei, ek = dataset.entries[i], dataset.entries[k]
        h, w = ei.noisy.shape[:2]
        a, p = sample_positive_boxes(h, w, crop, 0.25, rng)
        hn, wn = ek.noisy.shape[:2]
        ny = int(rng.integers(0, hn - crop + 1))
        nx = int(rng.integers(0, wn - crop + 1))

        def resid(entry, y0, x0):
            patch = entry.noisy[y0:y0 + crop, x0:x0 + crop]
            if params is None:
                return patch - entry.clean[y0:y0 + crop, x0:x0 + crop]
            recon = reconstruct_image(params, patch, "identity")
            return patch - recon

        r_anchor = resid(ei, *a)
        r_pos = resid(ei, *p)
        r_neg = resid(ek, ny, nx)
        values.append(_emd_np(r_anchor, r_neg) - _emd_np(r_anchor, r_pos))
    return DensityRecord(values, phase)


# -- label-efficiency sweep --------------------------------------------------


@dataclass
class SweepRow:
    label_count: int
    sl_psnr: float
    sl_ssim: float
    rcl_psnr: float
    rcl_ssim: float


def label_efficiency_sweep(train_ds: Dataset, test_ds: Dataset,
                           label_counts, cfg: TrainConfig,
                           pretrained: ModelParams | None = None,
                           task: str = "denoise") -> list[SweepRow]:
    """Supervised-from-scratch vs pretrain-then-finetune at several label
    budgets, with shared seeds and nested label subsets."""
    pool = [task_pair(e, task) for e in train_ds.entries]
    order = np.random.default_rng([cfg.seed, 13]).permutation(len(pool))
    if max(label_counts) > len(pool):
        raise InsufficientLabelsError(
            f"requested {max(label_counts)} labels, pool has {len(pool)}")
    if pretrained is None:
        pretrained, _ = pretrain(train_ds, cfg)
    head = task_head(task)
    rows = []
    for count in label_counts:
        subset = [pool[i] for i in order[:count]]
        scfg = replace(cfg, head=head)
        tuned = finetune(pretrained, subset, scfg, freeze_all_but_last=False)
        rp, rs = evaluate_params(tuned, test_ds, task, head)
        if count > 0:
            scratch = train_supervised(subset, scfg)
            sp, ss_ = evaluate_params(scratch, test_ds, task, head)
            sl_p, sl_s = float(np.mean(sp)), float(np.mean(ss_))
        else:
            sl_p, sl_s = float("nan"), float("nan")
        rows.append(SweepRow(count, sl_p, sl_s,
                             float(np.mean(rp)), float(np.mean(rs))))
    return rows
