"""Noise-prediction training of the conditional denoiser."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from ..dataset import Sample, inference_scale, sample_mask, sample_stream
from .conditioning import conditioning_channels
from .schedule import NoiseSchedule, forward_noise, make_schedule
from .unet import DenoiserSpec, UNet, build_denoiser

log = logging.getLogger(__name__)

LOSS_MASK_MODES = ("observed", "full")
TARGET_SCALES = ("inference", "corpus")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    epochs: int = 1000
    batch_size: int = 16
    learning_rate: float = 5e-5
    loss_mask: str = "observed"
    target_scale: str = "inference"
    resample_masks: bool = False
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    checkpoint_every: int = 0
    max_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.loss_mask not in LOSS_MASK_MODES:
            raise ValueError(f"loss_mask must be one of {LOSS_MASK_MODES}")
        if self.target_scale not in TARGET_SCALES:
            raise ValueError(f"target_scale must be one of {TARGET_SCALES}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        make_schedule(self.T, self.beta_min, self.beta_max)

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_min, self.beta_max)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown trainer keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Batch:
    cond: torch.Tensor       # (B, 3, I, J)
    target: torch.Tensor     # (B, 1, I, J), normalised magnitudes
    loss_mask: torch.Tensor  # (B, 1, I, J), 1 where the loss counts
    ids: list[int] = field(default_factory=list)


def target_field(sample: Sample, mask: np.ndarray, target_scale: str) -> np.ndarray:
    if target_scale == "corpus":
        return sample.normalized
    scale = inference_scale(sample.magnitude, mask)
    return np.clip(sample.magnitude / scale, 0.0, 1.0)


def make_batch(samples: Sequence[Sample], ids: Sequence[int], config: TrainerConfig,
               rng: np.random.Generator, spec: DenoiserSpec = DenoiserSpec()) -> Batch:
    conds, targets, masks = [], [], []
    for i in ids:
        s = samples[i]
        mask = s.mask.bits
        if config.resample_masks:
            mask = sample_mask(rng, s.mask.m, mask.shape).bits
        y = target_field(s, mask, config.target_scale)
        conds.append(conditioning_channels(y, mask, s.frequency, rng, spec.freq_embedding, spec.freq_channels))
        targets.append(y[None])
        masks.append(mask[None] if config.loss_mask == "observed" else np.ones_like(mask)[None])
    return Batch(
        torch.from_numpy(np.stack(conds)).float(),
        torch.from_numpy(np.stack(targets)).float(),
        torch.from_numpy(np.stack(masks).astype(np.float32)),
        list(ids),
    )


def masked_mse(pred: torch.Tensor, eps: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the cells selected by ``loss_mask``."""
    sq = (pred - eps) ** 2 * loss_mask
    return sq.sum() / loss_mask.sum().clamp_min(1.0)


def diffusion_loss(denoiser, batch: Batch, schedule: NoiseSchedule, generator: torch.Generator,
                   return_parts: bool = False):
    """Draw t and noise, corrupt the target and score the noise estimate."""
    B = batch.target.shape[0]
    dtype = next(denoiser.parameters()).dtype
    t = torch.randint(1, schedule.T + 1, (B,), generator=generator)
    gammas = torch.as_tensor(schedule.gammas, dtype=dtype)[t - 1]
    eps = torch.randn(batch.target.shape, generator=generator, dtype=dtype)
    noisy = forward_noise(batch.target.to(dtype), gammas[:, None, None, None], eps)
    pred = denoiser(batch.cond.to(dtype), noisy, gammas)
    loss = masked_mse(pred, eps, batch.loss_mask.to(dtype))
    if return_parts:
        return loss, {"t": t, "gamma": gammas, "eps": eps, "noisy": noisy, "pred": pred}
    return loss


def training_step(batch: Batch, denoiser: UNet, schedule: NoiseSchedule, optimizer: torch.optim.Optimizer,
                  generator: torch.Generator, step: int = 0) -> float:
    """One optimiser update; returns the loss before the update."""
    denoiser.train()
    loss, parts = diffusion_loss(denoiser, batch, schedule, generator, return_parts=True)
    value = float(loss.detach())
    if not np.isfinite(value):
        raise NonFiniteLossError(
            f"non-finite loss at step {step}: gammas={parts['gamma'].tolist()} batch ids={batch.ids}"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return value


def _step_generators(seed: int, step: int) -> tuple[np.random.Generator, torch.Generator]:
    rng = sample_stream(seed, 1, step)
    gen = torch.Generator().manual_seed(int(sample_stream(seed, 2, step).integers(2**62)))
    return rng, gen


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return sample_stream(seed, 0, epoch).permutation(n)


@dataclass
class TrainState:
    denoiser: UNet
    optimizer: torch.optim.Optimizer
    step: int = 0
    history: list[tuple[int, float, float]] = field(default_factory=list)


def new_state(spec: DenoiserSpec, config: TrainerConfig) -> TrainState:
    denoiser = build_denoiser(spec)
    return TrainState(denoiser, torch.optim.Adam(denoiser.parameters(), lr=config.learning_rate))


def total_steps(n_samples: int, config: TrainerConfig) -> int:
    per_epoch = -(-n_samples // config.batch_size)
    steps = config.epochs * per_epoch
    return min(steps, config.max_steps) if config.max_steps else steps


def train(samples: Sequence[Sample], config: TrainerConfig, spec: DenoiserSpec = DenoiserSpec(),
          state: TrainState | None = None, log_path=None,
          on_checkpoint: Callable[[TrainState], None] | None = None) -> TrainState:
    """Train (or resume) a denoiser.

    Every random draw is keyed by ``(config.seed, step)`` or
    ``(config.seed, epoch)``, so a resumed run reproduces an uninterrupted one
    given the same optimiser state.
    """
    if not samples:
        raise ValueError("training needs at least one sample")
    torch.use_deterministic_algorithms(True)
    schedule = config.schedule()
    state = state or new_state(spec, config)
    n = len(samples)
    per_epoch = -(-n // config.batch_size)
    stop = total_steps(n, config)
    writer = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = state.step == 0 or not log_path.exists()
        fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(["step", "loss", "wall_clock_s"])
    t0 = time.perf_counter()
    try:
        while state.step < stop:
            epoch, pos = divmod(state.step, per_epoch)
            order = _epoch_order(config.seed, epoch, n)
            ids = order[pos * config.batch_size:(pos + 1) * config.batch_size]
            rng, gen = _step_generators(config.seed, state.step)
            batch = make_batch(samples, [int(i) for i in ids], config, rng, state.denoiser.spec)
            loss = training_step(batch, state.denoiser, schedule, state.optimizer, gen, state.step)
            state.step += 1
            elapsed = time.perf_counter() - t0
            state.history.append((state.step, loss, elapsed))
            if writer is not None:
                writer.writerow([state.step, f"{loss:.8g}", f"{elapsed:.3f}"])
            if state.step % 100 == 0:
                log.info("step %d loss %.5f", state.step, loss)
            if on_checkpoint and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                on_checkpoint(state)
    finally:
        if writer is not None:
            fh.close()
    state.denoiser.eval()
    return state
