"""Denoiser checkpoints.

Layout (little-endian)::

    magic           b"SFCK"
    version         u32
    header length   u32
    header          UTF-8 JSON, sorted keys: denoiser spec, schedule, step count
    param count     u64
    parameters      f32, tensors in ``state_dict`` order, each flattened row-major
    checksum        u64 CRC-64 (crc-64-we) of every preceding byte

Optimiser moments for resuming are kept in a separate ``.state`` file so the
checkpoint itself only holds what inference needs.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import crcmod.predefined
import numpy as np
import torch

from .schedule import make_schedule
from .training import TrainerConfig, TrainState
from .unet import DenoiserSpec, UNet, build_denoiser

MAGIC = b"SFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def crc64(data: bytes) -> int:
    fn = crcmod.predefined.mkPredefinedCrcFun("crc-64-we")
    return fn(data)


def encode(denoiser: UNet, schedule: dict, step: int) -> bytes:
    header = json.dumps(
        {"denoiser": denoiser.spec.to_dict(), "schedule": schedule, "step": int(step)},
        sort_keys=True,
    ).encode()
    tensors = [t.detach().cpu().reshape(-1).to(torch.float32).numpy() for t in denoiser.state_dict().values()]
    params = np.concatenate(tensors).astype("<f4") if tensors else np.zeros(0, "<f4")
    body = (
        MAGIC
        + struct.pack("<II", VERSION, len(header))
        + header
        + struct.pack("<Q", params.size)
        + params.tobytes()
    )
    return body + struct.pack("<Q", crc64(body))


def decode(data: bytes) -> tuple[UNet, dict, int]:
    if len(data) < 20 or data[:4] != MAGIC:
        raise CheckpointError("not a denoiser checkpoint")
    body, (crc,) = data[:-8], struct.unpack("<Q", data[-8:])
    if crc64(body) != crc:
        raise CheckpointError("checksum mismatch")
    version, hlen = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(body[12:12 + hlen])
    off = 12 + hlen
    (count,) = struct.unpack_from("<Q", body, off)
    off += 8
    params = np.frombuffer(body, "<f4", count, off)
    if off + 4 * count != len(body):
        raise CheckpointError("parameter block size mismatch")
    denoiser = build_denoiser(DenoiserSpec.from_dict(header["denoiser"]))
    sd = denoiser.state_dict()
    expected = sum(t.numel() for t in sd.values())
    if expected != count:
        raise CheckpointError(f"checkpoint holds {count} parameters, spec needs {expected}")
    pos = 0
    loaded = {}
    for name, t in sd.items():
        loaded[name] = torch.from_numpy(params[pos:pos + t.numel()].copy()).reshape(t.shape).to(t.dtype)
        pos += t.numel()
    denoiser.load_state_dict(loaded)
    denoiser.eval()
    return denoiser, header["schedule"], header["step"]


def schedule_params(config: TrainerConfig) -> dict:
    return {"T": config.T, "beta_min": config.beta_min, "beta_max": config.beta_max}


def save(path, state: TrainState, config: TrainerConfig, with_state: bool = True) -> str:
    """Write the checkpoint (and optimiser state); returns its SHA-256 digest."""
    path = Path(path)
    data = encode(state.denoiser, schedule_params(config), state.step)
    path.write_bytes(data)
    if with_state:
        torch.save({"optimizer": state.optimizer.state_dict(), "step": state.step,
                    "trainer": config.to_dict()}, state_path(path))
    return hashlib.sha256(data).hexdigest()


def state_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".state")


def load(path):
    """Denoiser, noise schedule and step count from a checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    denoiser, sched, step = decode(path.read_bytes())
    return denoiser, make_schedule(sched["T"], sched["beta_min"], sched["beta_max"]), step


def load_state(path, config: TrainerConfig) -> TrainState:
    denoiser, _, step = load(path)
    optimizer = torch.optim.Adam(denoiser.parameters(), lr=config.learning_rate)
    extra = torch.load(state_path(path), weights_only=True)
    optimizer.load_state_dict(extra["optimizer"])
    if extra["step"] != step:
        raise CheckpointError("optimizer state does not match checkpoint step")
    return TrainState(denoiser, optimizer, step)


def digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
