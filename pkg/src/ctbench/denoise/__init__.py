"""Denoisers: preprocessing, losses, the CNN3 network, classical baselines."""

from .apply import DENOISER_KINDS, apply_denoiser, cnn3_denoise, describe, make_denoiser
from .classical import gaussian_denoise, gaussian_taps, tv_denoise
from .cnn3 import (Cnn3Weights, TrainConfig, TrainResult, cnn3_backward, cnn3_forward, cnn3_train,
                   load_weights, save_weights)
from .losses import LOSS_KINDS, LossConfig, loss_and_grad
from .preprocess import (AugmentConfig, PatchSet, PreprocessConfig, denormalize, dose_blend,
                         load_training_manifest, make_patch_set, normalize)

__all__ = [
    "DENOISER_KINDS", "apply_denoiser", "cnn3_denoise", "describe", "make_denoiser",
    "gaussian_denoise", "gaussian_taps", "tv_denoise",
    "Cnn3Weights", "TrainConfig", "TrainResult", "cnn3_backward", "cnn3_forward", "cnn3_train",
    "load_weights", "save_weights",
    "LOSS_KINDS", "LossConfig", "loss_and_grad",
    "AugmentConfig", "PatchSet", "PreprocessConfig", "denormalize", "dose_blend",
    "load_training_manifest", "make_patch_set", "normalize",
]
