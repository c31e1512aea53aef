from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dataset import Sample

FREQ_MIN = 30.0
FREQ_MAX = 300.0


@dataclass
class ConditioningInput:
    """(C, I, J) conditioning stack: noisy observations, mask, frequency."""

    channels: np.ndarray

    @property
    def observed(self) -> np.ndarray:
        return self.channels[0]

    @property
    def mask(self) -> np.ndarray:
        return self.channels[1]

    @property
    def frequency(self) -> np.ndarray:
        """First frequency channel."""
        return self.channels[2]


FREQ_EMBEDDINGS = ("constant", "sinusoidal")


def frequency_embedding(frequency: float, shape=(32, 32), kind: str = "constant",
                        channels: int = 1) -> np.ndarray:
    """(channels, I, J) spatially constant frequency encoding.

    ``constant`` is the min-max scaled frequency in one channel; ``sinusoidal``
    holds sin/cos pairs of 2^i * pi * u for the scaled frequency u.
    """
    u = (frequency - FREQ_MIN) / (FREQ_MAX - FREQ_MIN)
    if kind == "constant":
        if channels != 1:
            raise ValueError("constant frequency embedding has exactly one channel")
        values = [u]
    elif kind == "sinusoidal":
        if channels < 2 or channels % 2:
            raise ValueError("sinusoidal frequency embedding needs an even channel count >= 2")
        values = []
        for i in range(channels // 2):
            values += [np.sin(2**i * np.pi * u), np.cos(2**i * np.pi * u)]
    else:
        raise ValueError(f"frequency embedding must be one of {FREQ_EMBEDDINGS}, got {kind!r}")
    return np.stack([np.full(shape, v, dtype=np.float32) for v in values])


def conditioning_channels(observed: np.ndarray, mask: np.ndarray, frequency: float,
                          rng: np.random.Generator, embedding: str = "constant",
                          freq_channels: int = 1) -> np.ndarray:
    """Observed values where ``mask`` is set, fresh N(0, 1) draws elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    noise = rng.standard_normal(mask.shape)
    obs = np.where(mask, observed, noise)
    freq = frequency_embedding(frequency, mask.shape, embedding, freq_channels)
    return np.concatenate([np.stack([obs, mask.astype(np.float64)]), freq]).astype(np.float32)


def build_conditioning(sample: Sample, rng: np.random.Generator, embedding: str = "constant",
                       freq_channels: int = 1) -> ConditioningInput:
    return ConditioningInput(
        conditioning_channels(sample.normalized, sample.mask.bits, sample.frequency, rng,
                              embedding, freq_channels)
    )
