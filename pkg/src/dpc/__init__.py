"""Learned lossy image codec trained against a deep perceptual loss.

The public entry points are re-exported here; the submodules hold the
details (autodiff in :mod:`dpc.tensor`, the networks in :mod:`dpc.codecnet`,
coding in :mod:`dpc.entropy`).
"""

from .codecnet import CodecConfig, ModelParams, init_params, load_model, save_model
from .metrics import dpl, ms_ssim, psnr
from .pipeline import compress_array, decompress_bytes
from .train import TrainConfig, sweep_rd_points, train

__all__ = [
    "CodecConfig",
    "ModelParams",
    "TrainConfig",
    "compress_array",
    "decompress_bytes",
    "dpl",
    "init_params",
    "load_model",
    "ms_ssim",
    "psnr",
    "save_model",
    "sweep_rd_points",
    "train",
]
