"""Ancestral sampling of magnitude fields from a trained denoiser."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from ..dataset import Sample, inference_scale
from .conditioning import conditioning_channels
from .schedule import NoiseSchedule, sampling_steps
from .unet import UNet, denoise_predict

DEFAULT_STEPS = 250


def predict_clean(noisy, eps_hat, gamma):
    """Invert the forward corruption given a noise estimate."""
    return (noisy - (1.0 - gamma) ** 0.5 * eps_hat) / gamma**0.5


def observed_inputs(sample: Sample) -> tuple[np.ndarray, float]:
    """Observed cells normalised by the inference scale (unknown cells zeroed)."""
    mask = sample.mask.bits
    scale = inference_scale(sample.magnitude, mask)
    return np.where(mask, sample.magnitude / scale, 0.0), scale


@torch.no_grad()
def sample_fields(denoiser: UNet, cond: torch.Tensor, schedule: NoiseSchedule,
                  generator: torch.Generator, steps: int = DEFAULT_STEPS,
                  clip_denoised: bool = True) -> torch.Tensor:
    """Reverse process over a strided step subsequence; returns clean estimates in [0, 1].

    The strided chain uses the respaced betas 1 - gamma_t / gamma_prev, which
    reduces to the ordinary posterior when ``steps == T``.
    """
    denoiser.eval()
    dtype = next(denoiser.parameters()).dtype
    cond = cond.to(dtype)
    B, _, H, W = cond.shape
    ts = sampling_steps(schedule.T, steps)
    gammas = schedule.gammas
    y = torch.randn((B, 1, H, W), generator=generator, dtype=dtype)
    for idx in range(len(ts) - 1, -1, -1):
        g = float(gammas[ts[idx] - 1])
        g_prev = float(gammas[ts[idx - 1] - 1]) if idx > 0 else 1.0
        beta = 1.0 - g / g_prev
        eps_hat = denoise_predict(denoiser, cond, y, g)
        y0 = predict_clean(y, eps_hat, g)
        if clip_denoised:
            y0 = y0.clamp(0.0, 1.0)
        # posterior q(y_prev | y_t, y0)
        mean = (g_prev**0.5 * beta / (1 - g)) * y0 + ((1 - beta) ** 0.5 * (1 - g_prev) / (1 - g)) * y
        if idx > 0:
            var = beta * (1 - g_prev) / (1 - g)
            y = mean + var**0.5 * torch.randn(y.shape, generator=generator, dtype=dtype)
        else:
            y = mean
        if not torch.isfinite(y).all():
            raise FloatingPointError(f"non-finite reverse state at step t={ts[idx]} (gamma={g:.3e})")
    return y.clamp(0.0, 1.0)


def reconstruct_batch(denoiser: UNet, samples: Sequence[Sample], schedule: NoiseSchedule,
                      seed: int = 0, steps: int = DEFAULT_STEPS, batch_size: int = 16) -> list[np.ndarray]:
    """Reconstructed magnitude fields (physical units) for ``samples``.

    Only the observed cells, mask and frequency of each sample are used.
    """
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    out: list[np.ndarray] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        conds, obs, scales = [], [], []
        for s in chunk:
            o, scale = observed_inputs(s)
            conds.append(conditioning_channels(o, s.mask.bits, s.frequency, rng,
                                               denoiser.spec.freq_embedding, denoiser.spec.freq_channels))
            obs.append(o)
            scales.append(scale)
        y = sample_fields(denoiser, torch.from_numpy(np.stack(conds)), schedule, gen, steps)
        y = y[:, 0].double().numpy()
        for k, s in enumerate(chunk):
            field = np.where(s.mask.bits, obs[k], y[k]) * scales[k]
            # observed cells carry the measurements themselves
            field[s.mask.bits] = s.magnitude[s.mask.bits]
            out.append(field)
    return out


def reconstruct(denoiser: UNet, sample: Sample, schedule: NoiseSchedule, seed: int = 0,
                steps: int = DEFAULT_STEPS) -> np.ndarray:
    return reconstruct_batch(denoiser, [sample], schedule, seed, steps)[0]
