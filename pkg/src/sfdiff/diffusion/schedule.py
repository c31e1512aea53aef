from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete noise schedule; ``gammas[t-1]`` is the signal retention at step t."""

    betas: np.ndarray
    beta_min: float
    beta_max: float

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def gammas(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def gamma(self, t: int) -> float:
        """Noise level at 1-based step ``t``."""
        if not 1 <= t <= self.T:
            raise IndexError(f"step {t} outside [1, {self.T}]")
        return float(self.gammas[t - 1])


def make_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if T == 1 and beta_min != beta_max:
        raise ValueError("a single-step schedule needs beta_min == beta_max")
    betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    return NoiseSchedule(betas, float(beta_min), float(beta_max))


def sampling_steps(T: int, steps: int) -> np.ndarray:
    """Strided 1-based step subsequence of length ``steps``, always ending at T."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}], got {steps}")
    ts = np.round(np.linspace(1, T, steps)).astype(np.int64)
    return np.unique(ts)


def forward_noise(y, gamma, eps):
    """Noisy target sqrt(gamma) * y + sqrt(1 - gamma) * eps.

    Works on numpy arrays and torch tensors; ``gamma`` may broadcast.
    """
    if isinstance(gamma, (float, int)) and not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    return gamma**0.5 * y + (1.0 - gamma) ** 0.5 * eps
