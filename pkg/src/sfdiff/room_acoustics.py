"""Modal (Green's function) simulation of room transfer functions.

Rigid-walled rectangular rooms are modelled by a damped sum over the
cosine eigenmodes of the room. Everything here is a pure function of its
arguments, so batch simulation can be spread over threads freely.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

SPEED_OF_SOUND = 343.0
DEFAULT_MARGIN = 2.0
MAX_MODES = 2_000_000

# tolerance used when checking that a position lies inside the room
_POS_TOL = 1e-9


class ModeLimitError(RuntimeError):
    """Raised when the truncated mode set would exceed the configured cap."""


class ModeIndex(NamedTuple):
    nx: int
    ny: int
    nz: int


@dataclass(frozen=True)
class RoomSpec:
    """Shoebox room ``[0, lx] x [0, ly] x [0, lz]`` with a point source."""

    lx: float
    ly: float
    lz: float
    t60: float
    source: tuple[float, float, float]
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        object.__setattr__(self, "source", tuple(float(s) for s in self.source))
        dims = (self.lx, self.ly, self.lz)
        if not all(np.isfinite(d) and d > 0 for d in dims):
            raise ValueError(f"room dimensions must be positive, got {dims}")
        if not (np.isfinite(self.t60) and self.t60 > 0):
            raise ValueError(f"t60 must be positive, got {self.t60}")
        if not (np.isfinite(self.speed_of_sound) and self.speed_of_sound > 0):
            raise ValueError(f"speed of sound must be positive, got {self.speed_of_sound}")
        if len(self.source) != 3:
            raise ValueError("source must be a 3-vector")
        if not all(0.0 < s < d for s, d in zip(self.source, dims)):
            raise ValueError(f"source {self.source} is not strictly inside the room {dims}")

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.lx, self.ly, self.lz])

    @property
    def volume(self) -> float:
        return self.lx * self.ly * self.lz

    @property
    def floor_area(self) -> float:
        return self.lx * self.ly

    @property
    def damping(self) -> float:
        """Modal decay constant delta = 3 ln(10) / T60 in 1/s."""
        return 3.0 * np.log(10.0) / self.t60

    def with_source(self, source) -> "RoomSpec":
        return RoomSpec(self.lx, self.ly, self.lz, self.t60, tuple(source), self.speed_of_sound)


@dataclass(frozen=True)
class Grid:
    """Regular I x J sampling of the horizontal plane z = z_o."""

    room: RoomSpec
    z_o: float
    I: int = 32
    J: int = 32

    def __post_init__(self):
        if self.I < 2 or self.J < 2:
            raise ValueError(f"grid needs I, J >= 2, got {self.I} x {self.J}")
        if not (0.0 <= self.z_o <= self.room.lz):
            raise ValueError(f"z_o={self.z_o} outside [0, {self.room.lz}]")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.I, self.J)

    @property
    def xs(self) -> np.ndarray:
        return np.arange(self.I) * (self.room.lx / (self.I - 1))

    @property
    def ys(self) -> np.ndarray:
        return np.arange(self.J) * (self.room.ly / (self.J - 1))

    def position(self, i: int, j: int) -> np.ndarray:
        return np.array([i * self.room.lx / (self.I - 1), j * self.room.ly / (self.J - 1), self.z_o])

    def positions(self) -> np.ndarray:
        """All grid positions as an (I, J, 3) array, row-major in (i, j)."""
        X, Y = np.meshgrid(self.xs, self.ys, indexing="ij")
        return np.stack([X, Y, np.full_like(X, self.z_o)], axis=-1)


@dataclass
class FieldSlice:
    """Pressure values on a grid at one angular frequency."""

    values: np.ndarray
    omega: float
    grid: Grid | None = field(default=None, repr=False)

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.values)

    @property
    def frequency(self) -> float:
        return self.omega / (2 * np.pi)


def eigen_angular_frequency(n, room: RoomSpec) -> float:
    nx, ny, nz = n
    return float(
        room.speed_of_sound
        * np.pi
        * np.sqrt((nx / room.lx) ** 2 + (ny / room.ly) ** 2 + (nz / room.lz) ** 2)
    )


def _check_inside(r, room: RoomSpec) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    lo = -_POS_TOL * room.dims
    hi = room.dims * (1 + _POS_TOL)
    if np.any(r < lo) or np.any(r > hi):
        raise ValueError(f"position {r.tolist()} lies outside the room {room.dims.tolist()}")
    return r


def mode_shape(n, r, room: RoomSpec) -> float:
    """Rigid-wall eigenfunction cos(nx pi x/lx) cos(ny pi y/ly) cos(nz pi z/lz)."""
    r = _check_inside(r, room)
    nx, ny, nz = n
    return float(
        np.cos(nx * np.pi * r[0] / room.lx)
        * np.cos(ny * np.pi * r[1] / room.ly)
        * np.cos(nz * np.pi * r[2] / room.lz)
    )


def mode_table(room: RoomSpec, omega_max: float, margin: float = DEFAULT_MARGIN,
               max_modes: int = MAX_MODES) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised form of :func:`enumerate_modes`.

    Returns ``(indices, omegas)`` with ``indices`` an (K, 3) int array, sorted
    ascending by eigenfrequency and lexicographically on ties.
    """
    if not omega_max > 0:
        raise ValueError(f"omega_max must be positive, got {omega_max}")
    if not margin >= 1:
        raise ValueError(f"margin must be >= 1, got {margin}")
    limit = margin * omega_max
    c = room.speed_of_sound
    # ω_n <= limit implies n_a <= limit * l_a / (c π) along each axis
    bounds = [int(np.floor(limit * l / (c * np.pi))) for l in (room.lx, room.ly, room.lz)]
    ny_ = np.arange(bounds[1] + 1)
    nz_ = np.arange(bounds[2] + 1)
    NY, NZ = np.meshgrid(ny_, nz_, indexing="ij")
    base = (NY / room.ly) ** 2 + (NZ / room.lz) ** 2
    thresh = (limit / (c * np.pi)) ** 2

    chunks = []
    total = 0
    for nx in range(bounds[0] + 1):
        sq = (nx / room.lx) ** 2 + base
        keep = sq <= thresh
        cnt = int(keep.sum())
        if cnt == 0:
            break
        total += cnt
        if total > max_modes:
            raise ModeLimitError(
                f"more than {max_modes} modes below {limit:.1f} rad/s; raise max_modes or lower margin"
            )
        chunks.append(np.column_stack([np.full(cnt, nx), NY[keep], NZ[keep]]))
    idx = np.concatenate(chunks, axis=0)
    omegas = c * np.pi * np.sqrt(
        (idx[:, 0] / room.lx) ** 2 + (idx[:, 1] / room.ly) ** 2 + (idx[:, 2] / room.lz) ** 2
    )
    order = np.lexsort((idx[:, 2], idx[:, 1], idx[:, 0], omegas))
    return idx[order], omegas[order]


def enumerate_modes(room: RoomSpec, omega_max: float, margin: float = DEFAULT_MARGIN,
                    max_modes: int = MAX_MODES) -> list[ModeIndex]:
    """All mode indices with eigenfrequency <= margin * omega_max."""
    idx, _ = mode_table(room, omega_max, margin, max_modes)
    return [ModeIndex(int(a), int(b), int(c)) for a, b, c in idx]


def _modal_terms(room: RoomSpec, omega: float, idx: np.ndarray, omegas: np.ndarray) -> np.ndarray:
    """Per-mode factor psi_n(r_s) / (Lambda_n (w_n^2 - w^2 + 2j delta w))."""
    eps = np.where(idx > 0, 2.0, 1.0)
    norm = room.volume / eps.prod(axis=1)
    src = np.cos(idx * np.pi * (np.asarray(room.source) / room.dims)).prod(axis=1)
    denom = omegas**2 - omega**2 + 2j * room.damping * omega
    return src / (norm * denom)


def _mode_set(room: RoomSpec, omega: float, margin: float, modes) -> tuple[np.ndarray, np.ndarray]:
    if modes is None:
        return mode_table(room, omega, margin)
    idx = np.atleast_2d(np.asarray(modes, dtype=np.int64))
    return idx, room.speed_of_sound * np.pi * np.sqrt(((idx / room.dims) ** 2).sum(axis=1))


def simulate_rtf(room: RoomSpec, grid: Grid, omega: float, margin: float = DEFAULT_MARGIN,
                 modes: np.ndarray | None = None) -> FieldSlice:
    """Complex RTF on ``grid`` at angular frequency ``omega``.

    ``modes`` optionally overrides the truncated mode set with an explicit
    (K, 3) index array.
    """
    if not omega > 0:
        raise ValueError(f"omega must be positive, got {omega}")
    if grid.room != room:
        raise ValueError("grid belongs to a different room")
    idx, omegas = _mode_set(room, omega, margin, modes)
    coef = _modal_terms(room, omega, idx, omegas)
    # separable receiver term: cos along x (I), cos along y (J), scalar in z
    cx = np.cos(np.pi * np.outer(idx[:, 0], grid.xs) / room.lx)
    cy = np.cos(np.pi * np.outer(idx[:, 1], grid.ys) / room.ly)
    cz = np.cos(np.pi * idx[:, 2] * grid.z_o / room.lz)
    values = np.einsum("k,ki,kj->ij", coef * cz, cx, cy, optimize=True)
    if not np.all(np.isfinite(values)):
        raise FloatingPointError("non-finite value in simulated field")
    return FieldSlice(values=values, omega=float(omega), grid=grid)


def simulate_point(room: RoomSpec, receiver, omega: float, margin: float = DEFAULT_MARGIN,
                   modes: np.ndarray | None = None) -> complex:
    """Complex RTF between the room's source and a single receiver position.

    For frequency sweeps pass one ``modes`` set for the whole band: with the
    default per-frequency truncation the response jumps wherever a mode
    enters the sum.
    """
    r = _check_inside(receiver, room)
    idx, omegas = _mode_set(room, omega, margin, modes)
    coef = _modal_terms(room, omega, idx, omegas)
    rec = np.cos(idx * np.pi * (r / room.dims)).prod(axis=1)
    return complex(np.sum(coef * rec))


def magnitude(f: FieldSlice) -> FieldSlice:
    return FieldSlice(values=np.abs(f.values), omega=f.omega, grid=f.grid)
