"""Kernel ridge regression with the free-field Helmholtz kernel sinc(k |r - r'|)."""

from __future__ import annotations

from dataclasses import dataclass

import warnings

import numpy as np
import scipy.linalg

from .dataset import Sample
from .room_acoustics import DEFAULT_MARGIN, simulate_rtf

DEFAULT_RIDGE = 1e-3
LOO_GRID = np.logspace(-8, 0, 17)


class KernelSolveError(np.linalg.LinAlgError):
    """The regularised Gram system could not be solved."""


def helmholtz_kernel(r1, r2, k: float):
    """sin(kd)/(kd) with d = |r1 - r2|; exactly 1 where d == 0.

    ``r1`` and ``r2`` broadcast against each other over leading axes.
    """
    if not k > 0:
        raise ValueError(f"wavenumber must be positive, got {k}")
    d = np.linalg.norm(np.asarray(r1, float) - np.asarray(r2, float), axis=-1)
    kd = k * d
    safe = np.where(kd == 0, 1.0, kd)
    return np.where(kd == 0, 1.0, np.sin(safe) / safe)


def gram_matrix(positions: np.ndarray, k: float) -> np.ndarray:
    p = np.asarray(positions, float)
    K = helmholtz_kernel(p[:, None, :], p[None, :, :], k)
    # symmetric and unit-diagonal by construction of the distance matrix
    return K


@dataclass
class KernelModel:
    positions: np.ndarray
    k: float
    ridge: float
    weights: np.ndarray

    def predict(self, targets) -> np.ndarray:
        return predict(self, targets)


def _solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        c, low = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
        return scipy.linalg.cho_solve((c, low), b, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    # rounding can push a tiny ridge below the most negative computed eigenvalue
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            x = scipy.linalg.solve(A, b, assume_a="sym", check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise KernelSolveError(f"singular kernel system (condition number {np.linalg.cond(A):.3e})") from exc
    if not np.all(np.isfinite(x)):
        raise KernelSolveError(f"non-finite weights (condition number {np.linalg.cond(A):.3e})")
    return x


def fit(positions, values, k: float, ridge: float = DEFAULT_RIDGE) -> KernelModel:
    """Solve (K + ridge I) w = values for the weights."""
    positions = np.atleast_2d(np.asarray(positions, float))
    values = np.asarray(values)
    if positions.shape[0] < 1:
        raise ValueError("need at least one observation")
    if values.shape != (positions.shape[0],):
        raise ValueError(f"expected {positions.shape[0]} values, got shape {values.shape}")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    K = gram_matrix(positions, k)
    A = K + ridge * np.eye(len(K))
    if ridge == 0:
        _, counts = np.unique(positions, axis=0, return_counts=True)
        if np.any(counts > 1):
            raise KernelSolveError(
                f"duplicate observation positions with zero ridge (condition number {np.linalg.cond(A):.3e})"
            )
    w = _solve(A, values)
    return KernelModel(positions, float(k), float(ridge), w)


def predict(model: KernelModel, targets) -> np.ndarray:
    t = np.asarray(targets, float)
    flat = t.reshape(-1, 3)
    kappa = helmholtz_kernel(flat[:, None, :], model.positions[None, :, :], model.k)
    return (kappa @ model.weights).reshape(t.shape[:-1])


def loo_residuals(positions, values, k: float, ridge: float) -> np.ndarray:
    """Closed-form leave-one-out residuals w_i / [(K + ridge I)^-1]_ii."""
    K = gram_matrix(positions, k)
    inv = scipy.linalg.inv(K + ridge * np.eye(len(K)))
    return (inv @ values) / np.diag(inv)


def select_ridge(positions, values, k: float, grid=LOO_GRID) -> float:
    """Ridge from ``grid`` minimising the leave-one-out NMSE on the observations."""
    energy = np.sum(np.abs(values) ** 2)
    best, best_err = float(grid[0]), np.inf
    for lam in grid:
        try:
            err = np.sum(np.abs(loo_residuals(positions, values, k, lam)) ** 2) / energy
        except np.linalg.LinAlgError:
            continue
        if err < best_err:
            best, best_err = float(lam), err
    return best


def reconstruct_slice(sample: Sample, mode: str = "complex", ridge: float | str | None = None,
                      margin: float | None = None) -> np.ndarray:
    """Magnitude field estimated from the sample's observed cells.

    ``mode="complex"`` re-simulates the complex pressure at the observed cells
    and interpolates it; ``mode="magnitude"`` interpolates the magnitudes
    directly. ``ridge=None`` uses 1e-3 * trace(K) / m, ``ridge="loo"`` picks it
    by leave-one-out. Observed cells are copied through unchanged.
    """
    mask = sample.mask.bits
    if not mask.any():
        raise ValueError("sample has no observed cells")
    pos = sample.grid.positions()
    obs_pos = pos[mask]
    k = sample.omega / sample.room.speed_of_sound
    if mode == "complex":
        field = simulate_rtf(sample.room, sample.grid, sample.omega, margin or DEFAULT_MARGIN).values
        obs = field[mask]
    elif mode == "magnitude":
        obs = sample.magnitude[mask]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if ridge is None:
        # unit diagonal, so trace(K) / m == 1
        ridge = DEFAULT_RIDGE
    elif ridge == "loo":
        ridge = select_ridge(obs_pos, obs, k)
    model = fit(obs_pos, obs, k, float(ridge))
    est = np.abs(predict(model, pos))
    est[mask] = sample.magnitude[mask]
    return est
