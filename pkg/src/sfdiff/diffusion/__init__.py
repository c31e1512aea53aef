"""Conditional denoising diffusion for magnitude field inpainting."""

from .conditioning import ConditioningInput, build_conditioning, conditioning_channels, frequency_embedding
from .sampling import predict_clean, reconstruct, reconstruct_batch, sample_fields
from .schedule import NoiseSchedule, forward_noise, make_schedule, sampling_steps
from .training import (
    Batch,
    NonFiniteLossError,
    TrainerConfig,
    TrainState,
    diffusion_loss,
    make_batch,
    masked_mse,
    train,
    training_step,
)
from .unet import DenoiserSpec, UNet, build_denoiser, denoise_predict

__all__ = [
    "Batch",
    "ConditioningInput",
    "DenoiserSpec",
    "NoiseSchedule",
    "NonFiniteLossError",
    "TrainState",
    "TrainerConfig",
    "UNet",
    "build_conditioning",
    "build_denoiser",
    "conditioning_channels",
    "denoise_predict",
    "diffusion_loss",
    "forward_noise",
    "frequency_embedding",
    "make_batch",
    "make_schedule",
    "masked_mse",
    "predict_clean",
    "reconstruct",
    "reconstruct_batch",
    "sample_fields",
    "sampling_steps",
    "train",
    "training_step",
]
