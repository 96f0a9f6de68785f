"""Sparse-view CT reconstruction with supervised pretraining and deep-image-prior fine-tuning."""

from . import ct, dip, metrics, phantoms, pretrain, spectral, unet
from .baselines import baseline_tv_reconstruct
from .dip import DipConfig, RunHistory, StopRule, reconstruct, warmup_schedule
from .metrics import hoyer, psnr, ssim
from .unet import UNetConfig, UNetParams, init_params

__version__ = "0.1.0"

__all__ = [
    "DipConfig", "RunHistory", "StopRule", "UNetConfig", "UNetParams", "baseline_tv_reconstruct", "ct",
    "dip", "hoyer", "init_params", "metrics", "phantoms", "pretrain", "psnr", "reconstruct", "spectral",
    "ssim", "unet", "warmup_schedule",
]
