"""Self-contained lab for residual-based contrastive pre-training on noisy
images: autodiff tensors, small restoration networks, signal-dependent noise
simulation, distribution-distance losses, and evaluation protocols."""

from .autodiff import Tensor, conv2d, grad_check
from .models import (
    Adam,
    FeatureEncoder,
    ModelParams,
    build_net,
    load_checkpoint,
    save_checkpoint,
)
from .noise import (
    DEFAULT_NOISE_RANGE,
    NoiseParams,
    NoiseRange,
    apply_nlf_noise,
    demosaic_bilinear,
    gen_procedural_image,
    make_noisy_pair,
    mosaic,
    sample_nlf_params,
)
from .train import Dataset, TrainConfig, finetune, pretrain, rcl_step

__all__ = [
    "Adam", "Dataset", "DEFAULT_NOISE_RANGE", "FeatureEncoder", "ModelParams",
    "NoiseParams", "NoiseRange", "Tensor", "TrainConfig", "apply_nlf_noise",
    "build_net", "conv2d", "demosaic_bilinear", "finetune",
    "gen_procedural_image", "grad_check", "load_checkpoint", "make_noisy_pair",
    "mosaic", "pretrain", "rcl_step", "sample_nlf_params", "save_checkpoint",
]

__version__ = "0.1.0"
