"""Randomised room corpora, magnitude normalisation and the SFD1 file format.

Every sample draws from its own RNG stream derived from ``(seed, index)``,
so serial and threaded generation write the same bytes.

SFD1 layout (little-endian)::

    magic    b"SFD1"
    header   version u32, I u32, J u32, count u64
    records  lx ly lz t60 sx sy sz c z_o frequency_hz scale   (11 x f64)
             mask bits, row-major, packed MSB-first           (ceil(I*J/8) bytes)
             normalized field, row-major                      (I*J x f32)
             magnitude field, row-major                       (I*J x f32)
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .room_acoustics import DEFAULT_MARGIN, Grid, RoomSpec, magnitude, simulate_rtf

FORMAT_VERSION = 1
MAGIC = b"SFD1"
_HEADER = struct.Struct("<4sIIIQ")
_META = struct.Struct("<11d")

INFERENCE_HEADROOM = 1.2
PROTOCOL_MIC_COUNTS = (64, 128, 256, 512)


@dataclass(frozen=True)
class DatasetConfig:
    grid_shape: tuple[int, int] = (32, 32)
    freq_range: tuple[float, float] = (30.0, 300.0)
    area_range: tuple[float, float] = (20.0, 60.0)
    aspect_range: tuple[float, float] = (0.5, 2.0)
    height_range: tuple[float, float] = (2.5, 4.0)
    plane_height_range: tuple[float, float] = (1.0, 1.5)
    t60: float = 0.6
    wall_clearance: float = 0.1
    mic_counts: tuple[int, ...] = PROTOCOL_MIC_COUNTS
    margin: float = DEFAULT_MARGIN
    speed_of_sound: float = 343.0

    def __post_init__(self):
        for name in ("freq_range", "area_range", "aspect_range", "height_range", "plane_height_range"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        if self.t60 <= 0:
            raise ValueError("t60 must be positive")
        I, J = self.grid_shape
        if I < 2 or J < 2:
            raise ValueError("grid must be at least 2 x 2")
        if not self.mic_counts or any(not 1 <= m <= I * J for m in self.mic_counts):
            raise ValueError(f"mic counts must lie in [1, {I * J}]")
        if self.margin < 1:
            raise ValueError("margin must be >= 1")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class ObservationMask:
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)

    @property
    def m(self) -> int:
        return int(self.bits.sum())

    @property
    def coverage(self) -> float:
        return self.m / self.bits.size


@dataclass
class Sample:
    magnitude: np.ndarray
    normalized: np.ndarray
    scale: float
    mask: ObservationMask
    frequency: float
    room: RoomSpec
    grid: Grid

    @property
    def omega(self) -> float:
        return 2 * np.pi * self.frequency


@dataclass
class CorpusManifest:
    split: str
    seed: int
    n_rooms: int
    n_freqs: int
    sample_count: int
    config: dict
    files: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> "CorpusManifest":
        return cls(**json.loads(Path(path).read_text()))


def sample_stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a given (seed, key...) tuple."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


def sample_room(rng: np.random.Generator, config: DatasetConfig = DatasetConfig()) -> RoomSpec:
    area = rng.uniform(*config.area_range)
    aspect = rng.uniform(*config.aspect_range)
    lx = np.sqrt(area * aspect)
    ly = np.sqrt(area / aspect)
    lz = rng.uniform(*config.height_range)
    clr = config.wall_clearance
    source = tuple(rng.uniform(clr, d - clr) for d in (lx, ly, lz))
    return RoomSpec(float(lx), float(ly), float(lz), config.t60, source, config.speed_of_sound)


def sample_mask(rng: np.random.Generator, m: int, shape=(32, 32)) -> ObservationMask:
    """Exactly ``m`` distinct cells, uniform without replacement."""
    n = int(np.prod(shape))
    if not 1 <= m <= n:
        raise ValueError(f"microphone count must lie in [1, {n}], got {m}")
    flat = np.zeros(n, dtype=bool)
    flat[rng.choice(n, size=m, replace=False)] = True
    return ObservationMask(flat.reshape(shape))


def inference_scale(field: np.ndarray, mask: np.ndarray, headroom: float = INFERENCE_HEADROOM) -> float:
    observed = np.asarray(field)[np.asarray(mask, dtype=bool)]
    if observed.size == 0:
        raise ValueError("inference scale needs at least one observed cell")
    peak = float(np.max(observed))
    if not peak > 0:
        raise ValueError("observed cells are all zero")
    return headroom * peak


def normalize(field: np.ndarray, mask: np.ndarray | None = None,
              headroom: float = INFERENCE_HEADROOM) -> tuple[np.ndarray, float]:
    """Scale a magnitude field into [0, 1].

    Without ``mask`` the divisor is the full-grid maximum (training, ground
    truth known). With ``mask`` it is ``headroom`` times the maximum over the
    observed cells (inference).
    """
    field = np.asarray(field, dtype=float)
    if not np.all(np.isfinite(field)):
        raise ValueError("field contains non-finite values")
    if mask is None:
        scale = float(np.max(field))
        if not scale > 0:
            raise ValueError("cannot normalise an all-zero field")
    else:
        scale = inference_scale(field, mask, headroom)
    return np.clip(field / scale, 0.0, 1.0), scale


def denormalize(normalized: np.ndarray, scale: float) -> np.ndarray:
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    return np.asarray(normalized) * scale


def make_sample(room: RoomSpec, z_o: float, frequency: float, mask: ObservationMask,
                config: DatasetConfig = DatasetConfig()) -> Sample:
    grid = Grid(room, z_o, *config.grid_shape)
    mag = magnitude(simulate_rtf(room, grid, 2 * np.pi * frequency, config.margin)).values
    # stored precision; normalised against the rounded field so both agree
    mag = mag.astype(np.float32).astype(np.float64)
    normalized, scale = normalize(mag)
    return Sample(mag, normalized, scale, mask, float(frequency), room, grid)


def _training_sample(seed: int, index: int, config: DatasetConfig) -> Sample:
    rng = sample_stream(seed, index)
    room = sample_room(rng, config)
    z_o = rng.uniform(*config.plane_height_range)
    freq = rng.uniform(*config.freq_range)
    m = int(rng.choice(config.mic_counts))
    mask = sample_mask(rng, m, config.grid_shape)
    return make_sample(room, z_o, freq, mask, config)


def generate_training_samples(seed: int, n_rooms: int, config: DatasetConfig = DatasetConfig(),
                              threads: int = 1) -> list[Sample]:
    if n_rooms < 1:
        raise ValueError("n_rooms must be >= 1")
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(lambda i: _training_sample(seed, i, config), range(n_rooms)))
    return [_training_sample(seed, i, config) for i in range(n_rooms)]


def evaluation_frequencies(n_freqs: int, freq_range=(30.0, 300.0)) -> np.ndarray:
    if n_freqs < 1:
        raise ValueError("n_freqs must be >= 1")
    if n_freqs == 1:
        return np.array([float(freq_range[0])])
    return np.linspace(freq_range[0], freq_range[1], n_freqs)


def _eval_room(seed: int, room_index: int, freqs: np.ndarray,
               config: DatasetConfig) -> dict[int, list[Sample]]:
    rng = sample_stream(seed, room_index)
    room = sample_room(rng, config)
    z_o = rng.uniform(*config.plane_height_range)
    masks = {m: sample_mask(rng, m, config.grid_shape) for m in config.mic_counts}
    out: dict[int, list[Sample]] = {m: [] for m in config.mic_counts}
    for f in freqs:
        base = make_sample(room, z_o, f, masks[config.mic_counts[0]], config)
        for m in config.mic_counts:
            out[m].append(Sample(base.magnitude, base.normalized, base.scale, masks[m],
                                 base.frequency, room, base.grid))
    return out


def generate_eval_samples(seed: int, n_rooms: int, n_freqs: int,
                          config: DatasetConfig = DatasetConfig(),
                          threads: int = 1) -> dict[int, list[Sample]]:
    """Test slices keyed by microphone count.

    Each room gets one mask per count, shared across its frequencies, so every
    (room, frequency) slice appears once under every density.
    """
    if n_rooms < 1:
        raise ValueError("n_rooms must be >= 1")
    freqs = evaluation_frequencies(n_freqs, config.freq_range)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            rooms = list(ex.map(lambda r: _eval_room(seed, r, freqs, config), range(n_rooms)))
    else:
        rooms = [_eval_room(seed, r, freqs, config) for r in range(n_rooms)]
    return {m: [s for room in rooms for s in room[m]] for m in config.mic_counts}


def _mask_nbytes(I: int, J: int) -> int:
    return (I * J + 7) // 8


def encode_sample(s: Sample) -> bytes:
    r = s.room
    meta = _META.pack(r.lx, r.ly, r.lz, r.t60, *r.source, r.speed_of_sound,
                      s.grid.z_o, s.frequency, s.scale)
    bits = np.packbits(s.mask.bits.ravel()).tobytes()
    norm = np.ascontiguousarray(s.normalized, dtype="<f4").tobytes()
    mag = np.ascontiguousarray(s.magnitude, dtype="<f4").tobytes()
    return meta + bits + norm + mag


def write_corpus(path, samples: list[Sample]) -> None:
    path = Path(path)
    if samples:
        I, J = samples[0].grid.shape
    else:
        I, J = 32, 32
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, I, J, len(samples)))
        for s in samples:
            if s.grid.shape != (I, J):
                raise ValueError("all samples in a corpus must share the grid shape")
            fh.write(encode_sample(s))


def read_corpus(path) -> list[Sample]:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, I, J, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    n = I * J
    nbits = _mask_nbytes(I, J)
    rec = _META.size + nbits + 8 * n
    if len(data) != _HEADER.size + count * rec:
        raise ValueError(f"{path}: size {len(data)} does not match {count} records")
    samples = []
    off = _HEADER.size
    for _ in range(count):
        lx, ly, lz, t60, sx, sy, sz, c, z_o, freq, scale = _META.unpack_from(data, off)
        off += _META.size
        bits = np.unpackbits(np.frombuffer(data, np.uint8, nbits, off))[:n].astype(bool)
        off += nbits
        norm = np.frombuffer(data, "<f4", n, off).reshape(I, J)
        off += 4 * n
        mag = np.frombuffer(data, "<f4", n, off).reshape(I, J)
        off += 4 * n
        room = RoomSpec(lx, ly, lz, t60, (sx, sy, sz), c)
        samples.append(Sample(mag.astype(np.float64), norm.astype(np.float64), scale,
                              ObservationMask(bits.reshape(I, J)), freq, room, Grid(room, z_o, I, J)))
    return samples


def build_training_corpus(seed: int, n_rooms: int, out_dir, config: DatasetConfig = DatasetConfig(),
                          threads: int = 1) -> CorpusManifest:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = generate_training_samples(seed, n_rooms, config, threads)
    write_corpus(out_dir / "train.sfd", samples)
    manifest = CorpusManifest("train", seed, n_rooms, 1, len(samples), config.to_dict(),
                              files={"train": "train.sfd"})
    manifest.write(out_dir / "manifest.json")
    return manifest


def build_test_corpus(seed: int, n_rooms: int, n_freqs: int, out_dir,
                      config: DatasetConfig = DatasetConfig(), threads: int = 1) -> CorpusManifest:
    """One shard per microphone count, each holding n_rooms * n_freqs slices."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shards = generate_eval_samples(seed, n_rooms, n_freqs, config, threads)
    files = {}
    for m, samples in shards.items():
        name = f"test_m{m}.sfd"
        write_corpus(out_dir / name, samples)
        files[str(m)] = name
    manifest = CorpusManifest("test", seed, n_rooms, n_freqs, n_rooms * n_freqs, config.to_dict(),
                              files=files)
    manifest.write(out_dir / "manifest.json")
    return manifest


def load_manifest_corpus(manifest_path) -> dict[str, list[Sample]]:
    """Read every shard listed in a manifest, keyed like ``manifest.files``."""
    manifest_path = Path(manifest_path)
    manifest = CorpusManifest.read(manifest_path)
    return {k: read_corpus(manifest_path.parent / v) for k, v in manifest.files.items()}
