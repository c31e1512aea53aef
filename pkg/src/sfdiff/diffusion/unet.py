"""U-Net noise predictor conditioned by channel concatenation and a noise-level embedding."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import FREQ_MIN, frequency_embedding



@dataclass(frozen=True)
class DenoiserSpec:
    base_width: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4)
    num_res_blocks: int = 2
    attention_resolutions: tuple[int, ...] = (8,)
    embed_dim: int = 128
    image_size: int = 32
    freq_embedding: str = "constant"
    freq_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        # raises on an invalid embedding/channel combination
        frequency_embedding(FREQ_MIN, (1, 1), self.freq_embedding, self.freq_channels)

    @property
    def cond_channels(self) -> int:
        """Observed values, mask, then the frequency channels."""
        return 2 + self.freq_channels

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown denoiser keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _groups(ch: int) -> int:
    for g in (32, 16, 8, 4, 2):
        if ch % g == 0 and ch // g >= 1 and g <= ch:
            return g
    return 1


def noise_level_embedding(gamma: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of 1000 * sqrt(gamma)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=gamma.dtype) / half)
    args = 1000.0 * gamma.sqrt()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention(nn.Module):
    def __init__(self, ch: int, heads: int = 1):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, self.heads, c // self.heads, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bhci,bhcj->bhij", q, k) / math.sqrt(c // self.heads), dim=-1)
        out = torch.einsum("bhij,bhcj->bhci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class Stage(nn.Module):
    def __init__(self, in_ch, out_ch, emb_dim, attention):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, emb_dim)
        self.attn = SelfAttention(out_ch) if attention else None

    def forward(self, x, emb):
        x = self.res(x, emb)
        return self.attn(x) if self.attn is not None else x


class UNet(nn.Module):
    def __init__(self, spec: DenoiserSpec):
        super().__init__()
        self.spec = spec
        ch = spec.base_width
        emb_dim = spec.embed_dim
        self.embed = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.inp = nn.Conv2d(spec.cond_channels + 1, ch, 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        skips = [ch]
        res = spec.image_size
        cur = ch
        for level, mult in enumerate(spec.channel_mults):
            blocks = nn.ModuleList()
            for _ in range(spec.num_res_blocks):
                blocks.append(Stage(cur, ch * mult, emb_dim, res in spec.attention_resolutions))
                cur = ch * mult
                skips.append(cur)
            self.down.append(blocks)
            if level < len(spec.channel_mults) - 1:
                self.downsample.append(nn.Conv2d(cur, cur, 3, stride=2, padding=1))
                skips.append(cur)
                res //= 2

        self.mid1 = ResBlock(cur, cur, emb_dim)
        self.mid_attn = SelfAttention(cur)
        self.mid2 = ResBlock(cur, cur, emb_dim)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for level, mult in reversed(list(enumerate(spec.channel_mults))):
            blocks = nn.ModuleList()
            for _ in range(spec.num_res_blocks + 1):
                blocks.append(Stage(cur + skips.pop(), ch * mult, emb_dim, res in spec.attention_resolutions))
                cur = ch * mult
            self.up.append(blocks)
            if level > 0:
                self.upsample.append(nn.Conv2d(cur, cur, 3, padding=1))
                res *= 2

        self.out_norm = nn.GroupNorm(_groups(cur), cur)
        self.out = nn.Conv2d(cur, 1, 3, padding=1)

    def forward(self, cond: torch.Tensor, noisy: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
        emb = self.embed(noise_level_embedding(gamma, self.spec.embed_dim))
        h = self.inp(torch.cat([cond, noisy], dim=1))
        hs = [h]
        for level, blocks in enumerate(self.down):
            for block in blocks:
                h = block(h, emb)
                hs.append(h)
            if level < len(self.downsample):
                h = self.downsample[level](h)
                hs.append(h)
        h = self.mid2(self.mid_attn(self.mid1(h, emb)), emb)
        for level, blocks in enumerate(self.up):
            for block in blocks:
                h = block(torch.cat([h, hs.pop()], dim=1), emb)
            if level < len(self.upsample):
                h = self.upsample[level](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out(F.silu(self.out_norm(h)))


def build_denoiser(spec: DenoiserSpec = DenoiserSpec()) -> UNet:
    """Fresh network whose initial parameters depend only on ``spec.seed``."""
    if spec.image_size % (2 ** (len(spec.channel_mults) - 1)):
        raise ValueError("image size must be divisible by the total downsampling factor")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        return UNet(spec)


def denoise_predict(denoiser: UNet, cond, noisy, gamma) -> torch.Tensor:
    """Noise estimate for a batch (or a single unbatched item) of inputs."""
    cond = torch.as_tensor(cond)
    noisy = torch.as_tensor(noisy)
    single = cond.dim() == 3
    if single:
        cond, noisy = cond[None], noisy[None]
    if noisy.dim() == 3:
        noisy = noisy[:, None]
    dtype = next(denoiser.parameters()).dtype
    cond, noisy = cond.to(dtype), noisy.to(dtype)
    n = denoiser.spec.image_size
    if cond.shape[1:] != (denoiser.spec.cond_channels, n, n) or noisy.shape[1:] != (1, n, n):
        raise ValueError(
            f"expected conditioning (B, {denoiser.spec.cond_channels}, {n}, {n}) and target (B, 1, {n}, {n}), "
            f"got {tuple(cond.shape)} and {tuple(noisy.shape)}"
        )
    if cond.shape[0] != noisy.shape[0]:
        raise ValueError("batch sizes of conditioning and target differ")
    gamma = torch.as_tensor(gamma, dtype=dtype).reshape(-1)
    if gamma.numel() == 1:
        gamma = gamma.expand(cond.shape[0])
    out = denoiser(cond, noisy, gamma)
    return out[0, 0] if single else out
