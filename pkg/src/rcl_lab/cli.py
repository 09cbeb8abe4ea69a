"""Command-line entry point: dataset synthesis, training, evaluation, and
analysis workflows with persistent artifacts.

Usage: rcl-lab <simulate|pretrain|finetune|evaluate|analyze>
                --config <path> [--out <dir>] [--seed <u64>]
"""

from __future__ import annotations

import argparse
import csv
import struct
import sys
from dataclasses import dataclass
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np

from .evaluate import (
    InsufficientLabelsError,
    MetricsReport,
    TrialResult,
    density_analysis,
    evaluate_params,
    label_efficiency_sweep,
    proxy_evaluate,
    task_head,
    task_pair,
)
from .models import ModelParams, load_checkpoint, save_checkpoint
from .noise import (
    NoiseParams,
    NoiseRange,
    apply_nlf_noise,
    gen_procedural_image,
    sample_nlf_params,
)
from .train import Dataset, DatasetEntry, TrainConfig, finetune, pretrain
from .train import train_supervised  # noqa: F401  (re-export for scripts)


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


# -- key = value configuration ----------------------------------------------


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_counts(s: str):
    return [int(t) for t in s.split(",") if t.strip() != ""]


# name -> (parser, default)
CONFIG_SCHEMA = {
    "seed": (int, 0),
    "out": (str, "run"),
    # dataset synthesis / ingestion
    "images": (int, 64),
    "image_size": (int, 64),
    "sigma_min": (float, 0.0),
    "sigma_max": (float, 20.0 / 255.0),
    "data_dir": (str, ""),
    "dataset": (str, ""),          # manifest path for train/eval commands
    "test_images": (int, 8),
    # training
    "mode": (str, "rcl"),
    "arch": (str, "unet-small"),
    "head": (str, "identity"),
    "domain": (str, "rgb"),
    "steps": (int, 2000),
    "batch_size": (int, 8),
    "crop": (int, 32),
    "overlap_min": (float, 0.25),
    "tau": (float, 0.5),
    "alpha": (float, 1e-3),
    "distance": (str, "emd"),
    "distance_scale": (float, 100.0),
    "lr": (float, 1e-3),
    # fine-tuning / evaluation
    "checkpoint": (str, ""),
    "labels": (int, 4),
    "freeze": (_parse_bool, False),
    "finetune_steps": (int, 300),
    "task": (str, "denoise"),
    "trials": (int, 1),
    # analysis
    "analyze": (str, "density"),
    "n_triples": (int, 500),
    "label_counts": (_parse_counts, [4, 32]),
}


@dataclass(frozen=True)
class RunConfig:
    """Validated, immutable key-value configuration for one command."""

    values: tuple

    def __getattr__(self, key):
        d = dict(self.values)
        if key in d:
            return d[key]
        raise AttributeError(key)

    def as_dict(self) -> dict:
        return dict(self.values)


def parse_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse one `key = value` per line; unknown keys abort with the key named."""
    raw: dict = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        parser, _ = CONFIG_SCHEMA[key]
        try:
            raw[key] = parser(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}")
    merged = {k: default for k, (_, default) in CONFIG_SCHEMA.items()}
    merged.update(raw)
    if overrides:
        merged.update(overrides)
    return RunConfig(tuple(sorted(merged.items(), key=lambda kv: kv[0])))


def echo_config(cfg: RunConfig, out_dir: Path) -> None:
    lines = [f"{k} = {_cfg_repr(v)}" for k, v in sorted(cfg.as_dict().items())]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _cfg_repr(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(str(x) for x in v)
    return str(v)


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        seed=cfg.seed, batch_size=cfg.batch_size, crop=cfg.crop,
        steps=cfg.steps, tau=cfg.tau, alpha=cfg.alpha, distance=cfg.distance,
        distance_scale=cfg.distance_scale, lr=cfg.lr,
        overlap_min=cfg.overlap_min, mode=cfg.mode, arch=cfg.arch,
        head=cfg.head, domain=cfg.domain, finetune_steps=cfg.finetune_steps,
    )


# -- binary tensor files and manifests --------------------------------------

TENSOR_MAGIC = b"RCT1"


def save_tensor(arr: np.ndarray, path) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        for extent in arr.shape:
            f.write(struct.pack("<I", extent))
        f.write(arr.astype("<f8").tobytes())


def load_tensor(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != TENSOR_MAGIC:
        raise ConfigError(f"{path}: bad tensor magic")
    (rank,) = struct.unpack("<I", blob[4:8])
    pos = 8
    shape = []
    for _ in range(rank):
        shape.append(struct.unpack("<I", blob[pos:pos + 4])[0])
        pos += 4
    n = int(np.prod(shape))
    data = np.frombuffer(blob[pos:pos + 8 * n], dtype="<f8")
    if data.size != n:
        raise ConfigError(f"{path}: truncated tensor file")
    return data.reshape(shape).copy()


def write_manifest(path, entries) -> None:
    """One line per image: clean-path, noisy-path, lambda_shot, lambda_read,
    noise-seed (comma-separated, paths relative to the manifest)."""
    lines = []
    for clean_rel, noisy_rel, p, noise_seed in entries:
        lines.append(f"{clean_rel},{noisy_rel},{p.lambda_shot!r},"
                     f"{p.lambda_read!r},{noise_seed}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(manifest_path, noise_range: NoiseRange | None = None) -> Dataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.txt"
    if not manifest_path.exists():
        raise MissingArtifactError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    ds = Dataset(noise_range=noise_range or Dataset().noise_range)
    for line in manifest_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        clean_rel, noisy_rel, shot, read, noise_seed = line.split(",")
        clean = load_tensor(root / clean_rel)
        noisy = load_tensor(root / noisy_rel)
        ds.entries.append(DatasetEntry(
            clean, NoiseParams(float(shot), float(read)), int(noise_seed), noisy))
    return ds


def write_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        csv.writer(f).writerows(rows)


def _split(ds: Dataset, test_images: int):
    if test_images >= len(ds):
        raise ConfigError("test_images must leave at least one training image")
    train = Dataset(ds.entries[:len(ds) - test_images], ds.noise_range)
    test = Dataset(ds.entries[len(ds) - test_images:], ds.noise_range)
    return train, test


# -- commands ----------------------------------------------------------------


def _load_png_dir(data_dir: Path):
    from PIL import Image

    paths = sorted(data_dir.glob("*.png"))
    if not paths:
        raise MissingArtifactError(f"no PNG files in {data_dir}")
    images = []
    for p in paths:
        arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0
        images.append(arr)
    return images


def cmd_simulate(cfg: RunConfig, out_dir: Path) -> Path:
    """Generate (or ingest) clean images, add per-image NLF noise, and write
    the clean/noisy tensor pairs plus a manifest."""
    noise_range = NoiseRange(cfg.sigma_min, cfg.sigma_max)
    if cfg.data_dir:
        cleans = _load_png_dir(Path(cfg.data_dir))
    else:
        cleans = [gen_procedural_image(cfg.seed * 100003 + i, cfg.image_size,
                                       cfg.image_size)
                  for i in range(cfg.images)]
    data_dir = out_dir / "dataset"
    data_dir.mkdir(parents=True, exist_ok=True)
    manifest_entries = []
    for i, clean in enumerate(cleans):
        p = sample_nlf_params(noise_range, np.random.default_rng([cfg.seed, i, 1]))
        noise_seed = cfg.seed * 1000003 + i
        noisy = apply_nlf_noise(clean, p, np.random.default_rng(noise_seed))
        clean_rel = f"clean_{i:04d}.rct"
        noisy_rel = f"noisy_{i:04d}.rct"
        save_tensor(clean, data_dir / clean_rel)
        save_tensor(noisy, data_dir / noisy_rel)
        manifest_entries.append((clean_rel, noisy_rel, p, noise_seed))
    manifest = data_dir / "manifest.txt"
    write_manifest(manifest, manifest_entries)
    print(f"wrote {len(cleans)} image pairs to {data_dir}")
    return manifest


def _require_dataset(cfg: RunConfig) -> Dataset:
    if not cfg.dataset:
        raise ConfigError("config key 'dataset' (manifest path) is required")
    return load_dataset(cfg.dataset, NoiseRange(cfg.sigma_min, cfg.sigma_max))


def cmd_pretrain(cfg: RunConfig, out_dir: Path) -> Path:
    ds = _require_dataset(cfg)
    tcfg = train_config(cfg)
    params, losses = pretrain(ds, tcfg)
    ckpt = out_dir / "checkpoint.rcl"
    save_checkpoint(params, ckpt)
    write_csv(out_dir / "loss.csv",
              [("step", "loss")] + [(i, f"{v:.9f}") for i, v in enumerate(losses)])
    print(f"pretrained {cfg.mode} for {tcfg.steps} steps; checkpoint at {ckpt}")
    return ckpt


def _require_checkpoint(cfg: RunConfig) -> ModelParams:
    if not cfg.checkpoint or not Path(cfg.checkpoint).exists():
        raise MissingArtifactError(f"checkpoint not found: {cfg.checkpoint!r}")
    return load_checkpoint(cfg.checkpoint)


def cmd_finetune(cfg: RunConfig, out_dir: Path) -> Path:
    params = _require_checkpoint(cfg)
    ds = _require_dataset(cfg)
    train_ds, test_ds = _split(ds, cfg.test_images)
    pool = [task_pair(e, cfg.task) for e in train_ds.entries]
    if cfg.labels > len(pool):
        raise InsufficientLabelsError(
            f"requested {cfg.labels} labels, pool has {len(pool)}")
    order = np.random.default_rng([cfg.seed, 13]).permutation(len(pool))
    subset = [pool[i] for i in order[:cfg.labels]]
    tcfg = dc_replace(train_config(cfg), head=task_head(cfg.task))
    tuned = finetune(params, subset, tcfg, freeze_all_but_last=cfg.freeze)
    ckpt = out_dir / "checkpoint.rcl"
    save_checkpoint(tuned, ckpt)
    ps, ss = evaluate_params(tuned, test_ds, cfg.task)
    report = MetricsReport(task=cfg.task, method="finetune")
    report.trials.append(TrialResult(cfg.seed, 0, ps, ss))
    write_csv(out_dir / "metrics.csv", report.csv_rows())
    print(f"finetuned on {cfg.labels} labels; PSNR {report.psnr_mean:.2f} dB")
    return ckpt


def cmd_evaluate(cfg: RunConfig, out_dir: Path) -> Path:
    params = _require_checkpoint(cfg)
    ds = _require_dataset(cfg)
    train_ds, test_ds = _split(ds, cfg.test_images)
    labeled = Dataset(train_ds.entries[:cfg.labels], ds.noise_range)
    report = proxy_evaluate(params, cfg.task, labeled, test_ds, cfg.trials,
                            train_config(cfg))
    out = out_dir / "metrics.csv"
    write_csv(out, report.csv_rows())
    print(f"proxy evaluation ({cfg.task}, {cfg.trials} trials): "
          f"PSNR {report.psnr_mean:.2f} dB, SSIM {report.ssim_mean:.4f}")
    return out


def cmd_analyze(cfg: RunConfig, out_dir: Path) -> Path:
    ds = _require_dataset(cfg)
    if cfg.analyze == "density":
        from .models import build_net

        phases = {}
        rng = np.random.default_rng([cfg.seed, 17])
        phases["true-noise"] = density_analysis(None, ds, cfg.n_triples, rng,
                                                "true-noise", cfg.crop)
        init_net = build_net(cfg.arch, 3, 3, "identity", cfg.seed)
        rng = np.random.default_rng([cfg.seed, 17])
        phases["pre-training"] = density_analysis(init_net.params, ds,
                                                  cfg.n_triples, rng,
                                                  "pre-training", cfg.crop)
        if cfg.checkpoint:
            trained = _require_checkpoint(cfg)
            rng = np.random.default_rng([cfg.seed, 17])
            phases["post-training"] = density_analysis(trained, ds,
                                                       cfg.n_triples, rng,
                                                       "post-training", cfg.crop)
        for name, rec in phases.items():
            write_csv(out_dir / f"density_{name}.csv", rec.csv_rows())
            print(f"{name}: positive mass {rec.positive_fraction:.3f} "
                  f"over {len(rec.values)} triples")
        return out_dir / "density_true-noise.csv"
    if cfg.analyze == "sweep":
        train_ds, test_ds = _split(ds, cfg.test_images)
        pretrained = _require_checkpoint(cfg) if cfg.checkpoint else None
        rows = label_efficiency_sweep(train_ds, test_ds, cfg.label_counts,
                                      train_config(cfg), pretrained, cfg.task)
        out = out_dir / "sweep.csv"
        csv_rows = [("labels", "sl_psnr", "sl_ssim", "rcl_psnr", "rcl_ssim")]
        for r in rows:
            csv_rows.append((r.label_count, f"{r.sl_psnr:.4f}",
                             f"{r.sl_ssim:.6f}", f"{r.rcl_psnr:.4f}",
                             f"{r.rcl_ssim:.6f}"))
        write_csv(out, csv_rows)
        print(f"label-efficiency sweep over {cfg.label_counts} written to {out}")
        return out
    raise ConfigError(f"unknown analyze sub-mode {cfg.analyze!r}")


COMMANDS = {
    "simulate": cmd_simulate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="rcl-lab",
        description="Residual-contrastive representation learning lab.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="key = value config file")
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="override run seed")
    args = ap.parse_args(argv)
    overrides = {}
    if args.out is not None:
        overrides["out"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        cfg = parse_config(args.config, overrides)
        out_dir = Path(cfg.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        echo_config(cfg, out_dir)
        COMMANDS[args.command](cfg, out_dir)
    except (ConfigError, MissingArtifactError, InsufficientLabelsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
