"""Timestep-conditioned U-Net denoiser with per-stage decoder taps."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class UNetConfig:
    in_channels: int
    image_size: int
    base_channels: int = 32
    stage_multipliers: Tuple[int, ...] = (1, 2, 4)
    time_embed_dim: int = 128
    groups_per_norm: int = 8
    # spatial sizes that get self-attention; None means the lowest resolution only
    attention_resolutions: Optional[Tuple[int, ...]] = None
    num_res_blocks: int = 1
    tap_middle: bool = False
    out_mode: str = "noise_and_logvar"

    def __post_init__(self):
        self.stage_multipliers = tuple(int(m) for m in self.stage_multipliers)
        if self.attention_resolutions is not None:
            self.attention_resolutions = tuple(int(r) for r in self.attention_resolutions)
        self.validate()

    def validate(self) -> None:
        if self.in_channels < 1 or self.base_channels < 1 or not self.stage_multipliers:
            raise ValueError("in_channels, base_channels and stage_multipliers must be positive/non-empty")
        s = len(self.stage_multipliers) - 1
        if self.image_size < 1 or self.image_size % (2**s):
            raise ValueError(
                f"image size {self.image_size} is not divisible by 2^{s} "
                f"({len(self.stage_multipliers)} resolution levels)"
            )
        if self.out_mode != "noise_and_logvar":
            raise ValueError(f"unsupported out_mode {self.out_mode!r}")

    @property
    def out_channels(self) -> int:
        return 2 * self.in_channels

    @property
    def lowest_resolution(self) -> int:
        return self.image_size // 2 ** (len(self.stage_multipliers) - 1)

    @property
    def attn_res(self) -> Tuple[int, ...]:
        return self.attention_resolutions if self.attention_resolutions is not None else (self.lowest_resolution,)

    @property
    def stage_channels(self) -> Tuple[int, ...]:
        """Channels of each tapped decoder stage, deepest first."""
        chans = [self.base_channels * m for m in reversed(self.stage_multipliers)]
        if self.tap_middle:
            chans.insert(0, self.base_channels * self.stage_multipliers[-1])
        return tuple(chans)

    @property
    def stage_resolutions(self) -> Tuple[int, ...]:
        res = [self.image_size // 2**k for k in reversed(range(len(self.stage_multipliers)))]
        if self.tap_middle:
            res.insert(0, self.lowest_resolution)
        return tuple(res)

    @property
    def feature_dim(self) -> int:
        return sum(self.stage_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_multipliers"] = list(self.stage_multipliers)
        if self.attention_resolutions is not None:
            d["attention_resolutions"] = list(self.attention_resolutions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def desk_config(in_channels: int, image_size: int = 48) -> UNetConfig:
    return UNetConfig(in_channels, image_size, base_channels=32, stage_multipliers=(1, 2, 4))


def full_scale_config(in_channels: int, image_size: int = 48) -> UNetConfig:
    # improved-DDPM style widths; heavy on CPU
    return UNetConfig(
        in_channels,
        image_size,
        base_channels=128,
        stage_multipliers=(1, 2, 3, 4),
        time_embed_dim=512,
        groups_per_norm=32,
        attention_resolutions=(12, 6),
        num_res_blocks=2,
    )


def timestep_embedding(t: torch.Tensor, dim: int, dtype: torch.dtype, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=dtype) / half)
    args = t.to(dtype)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(ch: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(groups, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = _norm(in_ch, groups)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.norm2 = _norm(out_ch, groups)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttnBlock(nn.Module):
    def __init__(self, ch: int, groups: int):
        super().__init__()
        self.norm = _norm(ch, groups)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x, emb=None):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x, emb=None):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, emb=None):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Block(nn.ModuleList):
    def forward(self, x, emb):
        for layer in self:
            x = layer(x, emb)
        return x


class UNet(nn.Module):
    """eps_theta(x_t, t): returns ``2 * in_channels`` maps (noise, variance interpolation)."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = cfg = config
        base, g, temb = cfg.base_channels, cfg.groups_per_norm, cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(base, temb), nn.SiLU(), nn.Linear(temb, temb))
        self.conv_in = nn.Conv2d(cfg.in_channels, base, 3, padding=1)

        skips = [base]
        ch, res = base, cfg.image_size
        self.down = nn.ModuleList()
        n_levels = len(cfg.stage_multipliers)
        for level, mult in enumerate(cfg.stage_multipliers):
            for _ in range(cfg.num_res_blocks):
                layers = [ResBlock(ch, base * mult, temb, g)]
                ch = base * mult
                if res in cfg.attn_res:
                    layers.append(AttnBlock(ch, g))
                self.down.append(Block(layers))
                skips.append(ch)
            if level != n_levels - 1:
                self.down.append(Block([Downsample(ch)]))
                skips.append(ch)
                res //= 2

        self.mid = Block([ResBlock(ch, ch, temb, g), AttnBlock(ch, g), ResBlock(ch, ch, temb, g)])

        # decoder levels deepest first; each followed by an upsample except the last
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for level, mult in reversed(list(enumerate(cfg.stage_multipliers))):
            blocks = nn.ModuleList()
            for _ in range(cfg.num_res_blocks + 1):
                layers = [ResBlock(ch + skips.pop(), base * mult, temb, g)]
                ch = base * mult
                if res in cfg.attn_res:
                    layers.append(AttnBlock(ch, g))
                blocks.append(Block(layers))
            self.up.append(blocks)
            if level:
                self.upsample.append(Upsample(ch))
                res *= 2

        self.out_norm = _norm(ch, g)
        self.out_conv = nn.Conv2d(ch, cfg.out_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)
        self.check_finite = False

    def _chk(self, h, name):
        if self.check_finite and not torch.isfinite(h).all():
            raise FloatingPointError(f"non-finite activation in layer {name}")
        return h

    def forward(self, x, t, return_taps: bool = False):
        dtype = self.conv_in.weight.dtype
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        emb = self.time_mlp(timestep_embedding(t, self.config.base_channels, dtype))
        h = self._chk(self.conv_in(x), "conv_in")
        hs = [h]
        for i, block in enumerate(self.down):
            h = self._chk(block(h, emb), f"down.{i}")
            hs.append(h)
        h = self._chk(self.mid(h, emb), "mid")
        taps = [h] if self.config.tap_middle else []
        for level, blocks in enumerate(self.up):
            for i, block in enumerate(blocks):
                h = self._chk(block(torch.cat([h, hs.pop()], dim=1), emb), f"up.{level}.{i}")
            taps.append(h)
            if level < len(self.upsample):
                h = self._chk(self.upsample[level](h), f"upsample.{level}")
        out = self._chk(self.out_conv(F.silu(self.out_norm(h))), "out")
        return (out, taps) if return_taps else out


def build(config: UNetConfig, seed: int = 0) -> UNet:
    """Deterministically initialized model for ``seed``."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UNet(config)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _as_batch(model: UNet, x_t, t):
    x = torch.as_tensor(np.asarray(x_t), dtype=model.conv_in.weight.dtype)
    single = x.ndim == 3
    if single:
        x = x[None]
    cfg = model.config
    if x.shape[1:] != (cfg.image_size, cfg.image_size, cfg.in_channels):
        raise ValueError(f"input shape {tuple(x.shape[1:])} does not match model ({cfg.image_size}, {cfg.image_size}, {cfg.in_channels})")
    if not torch.isfinite(x).all():
        raise ValueError("x_t must be finite")
    t = torch.as_tensor(np.asarray(t)).long().reshape(-1)
    if t.numel() == 1:
        t = t.expand(x.shape[0])
    return x.permute(0, 3, 1, 2), t, single


def _hwc(x: torch.Tensor, single: bool) -> np.ndarray:
    arr = x.permute(0, 2, 3, 1).detach().cpu().numpy()
    return arr[0] if single else arr


def forward(model: UNet, x_t, t) -> Tuple[np.ndarray, np.ndarray]:
    """Channels-last convenience wrapper: returns ``(eps_pred, logvar_interp)``."""
    (eps, v), _ = forward_with_taps(model, x_t, t, taps=False)
    return eps, v


def forward_with_taps(model: UNet, x_t, t, taps: bool = True):
    """Returns ``((eps_pred, logvar_interp), stage_activations)`` channels-last."""
    x, tt, single = _as_batch(model, x_t, t)
    was_training, check = model.training, model.check_finite
    model.eval()
    model.check_finite = True
    try:
        with torch.no_grad():
            out, acts = model(x, tt, return_taps=True)
    finally:
        model.train(was_training)
        model.check_finite = check
    D = model.config.in_channels
    eps, v = _hwc(out[:, :D], single), _hwc(out[:, D:], single)
    return (eps, v), ([_hwc(a, single) for a in acts] if taps else None)
