"""Noise-estimation backbone: one shared encoder, two independent decoders.

The network predicts the injected noise from (x_t, condition) concatenated on
channels. Both the enhancement path ("l2h") and the degradation path ("h2l")
run the same encoder parameters; each path has its own decoder so it can
learn its own degradation noise. Gated self-attention blocks (lambda-gated,
identity at init) sit at configurable encoder levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

PATH_L2H = "l2h"
PATH_H2L = "h2l"
PATHS = (PATH_L2H, PATH_H2L)


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    afi_levels: tuple = (2,)
    time_embed_dim: int = 128
    in_channels: int = 6
    out_channels: int = 3
    num_res_blocks: int = 2

    def __post_init__(self):
        if len(self.channel_mults) < 2:
            raise ValueError("need at least 2 resolution levels")
        bad = [l for l in self.afi_levels if not 0 <= l < len(self.channel_mults)]
        if bad:
            raise ValueError(f"afi_levels out of range: {bad}")
        if self.in_channels != 2 * self.out_channels:
            raise ValueError(
                "in_channels must be 2 * out_channels (latent concatenated with one condition)"
            )


def _norm(channels: int) -> nn.GroupNorm:
    groups = 8
    while channels % groups:
        groups //= 2
    return nn.GroupNorm(groups, channels)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic sin/cos positional embedding of integer timesteps."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / (half - 1))
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class TimeEmbedding(nn.Module):
    """Sinusoidal embedding followed by a two-layer MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.lin1 = nn.Linear(dim, dim)
        self.lin2 = nn.Linear(dim, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        emb = sinusoidal_embedding(t, self.dim)
        return self.lin2(F.silu(self.lin1(emb)))


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        # second conv zero-initialized: blocks start as (projected) identity
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AdaptiveFeatureInteraction(nn.Module):
    """Lambda-gated residual self-attention over spatial positions.

    Q, K, V come from one 1x1 projection of the input; attention logits are
    scaled by 1/sqrt(channels) before the row-wise softmax. The learnable
    gate starts at 0, so the block is the identity at initialization.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.gate = nn.Parameter(torch.zeros(()))

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        """Row-stochastic attention matrix of shape (b, h*w, h*w)."""
        b, c, h, w = x.shape
        q, k, _ = self.qkv(x).chunk(3, dim=1)
        q = q.flatten(2).transpose(1, 2)
        k = k.flatten(2).transpose(1, 2)
        return torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=1)
        q = q.flatten(2).transpose(1, 2)  # (b, hw, c)
        k = k.flatten(2).transpose(1, 2)
        v = v.flatten(2).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return self.gate * out + x


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class _EncoderLevel(nn.Module):
    def __init__(self, blocks, down):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)
        self.down = down


class Encoder(nn.Module):
    """Multi-scale feature trunk shared by both paths."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        base, temb = cfg.base_channels, cfg.time_embed_dim
        self.stem = nn.Conv2d(cfg.in_channels, base, 3, padding=1)
        levels = []
        ch = base
        for i, mult in enumerate(cfg.channel_mults):
            out = base * mult
            blocks = [
                ResBlock(ch if j == 0 else out, out, temb)
                for j in range(cfg.num_res_blocks)
            ]
            down = Downsample(out) if i < len(cfg.channel_mults) - 1 else None
            levels.append(_EncoderLevel(blocks, down))
            ch = out
        self.levels = nn.ModuleList(levels)

    def forward(self, x, temb, afi=None):
        h = self.stem(x)
        feats = []
        for i, level in enumerate(self.levels):
            for block in level.blocks:
                h = block(h, temb)
            if afi is not None and str(i) in afi:
                h = afi[str(i)](h)
            feats.append(h)
            if level.down is not None:
                h = level.down(h)
        return feats


class _DecoderLevel(nn.Module):
    def __init__(self, blocks, up):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)
        self.up = up


class Decoder(nn.Module):
    """Path-specific upsampling head consuming the shared encoder's features."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        base, temb = cfg.base_channels, cfg.time_embed_dim
        widths = [base * m for m in cfg.channel_mults]
        n_levels = len(widths)
        levels = []
        for i in reversed(range(n_levels)):
            h_ch = widths[i]  # arriving feature width at this level
            blocks = [
                ResBlock(h_ch + widths[i] if j == 0 else widths[i], widths[i], temb)
                for j in range(cfg.num_res_blocks)
            ]
            up = Upsample(widths[i], widths[i - 1]) if i > 0 else None
            levels.append(_DecoderLevel(blocks, up))
        self.levels = nn.ModuleList(levels)  # deepest first
        self.out_norm = _norm(base)
        self.out_conv = nn.Conv2d(base, cfg.out_channels, 3, padding=1)
        # near-zero (not exactly zero) head: keeps the initial prediction small
        # without cutting the gradient path back into the shared encoder
        nn.init.normal_(self.out_conv.weight, std=1e-3)
        nn.init.zeros_(self.out_conv.bias)

    def forward(self, feats, temb):
        n = len(feats)
        h = feats[-1]
        for k, level in enumerate(self.levels):
            i = n - 1 - k
            h = torch.cat([h, feats[i]], dim=1)
            for block in level.blocks:
                h = block(h, temb)
            if level.up is not None:
                h = level.up(h)
        return self.out_conv(F.silu(self.out_norm(h)))


class BidirectionalUNet(nn.Module):
    """Noise predictor with a shared encoder and one decoder per path.

    Encoder sharing is structural: there is exactly one encoder module and
    path selection only switches the decoder, so no weight copying can drift.
    `decoder_calls` counts forward invocations per path (used to assert the
    degradation decoder stays cold at inference).
    """

    def __init__(self, cfg: NetworkConfig = NetworkConfig()):
        super().__init__()
        self.cfg = cfg
        self.time_embed = TimeEmbedding(cfg.time_embed_dim)
        self.encoder = Encoder(cfg)
        self.decoder_l2h = Decoder(cfg)
        self.decoder_h2l = Decoder(cfg)
        widths = [cfg.base_channels * m for m in cfg.channel_mults]
        self.afi = nn.ModuleDict(
            {str(l): AdaptiveFeatureInteraction(widths[l]) for l in sorted(cfg.afi_levels)}
        )
        self.decoder_calls = {PATH_L2H: 0, PATH_H2L: 0}

    def predict_noise(self, x_t, condition, t, path: str) -> torch.Tensor:
        if path not in PATHS:
            raise ValueError(f"unknown path {path!r}, expected one of {PATHS}")
        if condition.shape != x_t.shape:
            raise ValueError(
                f"condition shape {tuple(condition.shape)} != x_t shape {tuple(x_t.shape)}"
            )
        self.decoder_calls[path] += 1
        temb = self.time_embed(t)
        feats = self.encoder(torch.cat([x_t, condition], dim=1), temb, self.afi)
        decoder = self.decoder_l2h if path == PATH_L2H else self.decoder_h2l
        return decoder(feats, temb)

    def forward(self, x_t, condition, t, path: str = PATH_L2H):
        return self.predict_noise(x_t, condition, t, path)

    def count_parameters(self) -> dict:
        """Per-component parameter counts; total equals the sum of the parts."""
        parts = {
            "encoder": self.encoder,
            "decoder_l2h": self.decoder_l2h,
            "decoder_h2l": self.decoder_h2l,
            "afi": self.afi,
            "time_embed": self.time_embed,
        }
        counts = {name: sum(p.numel() for p in mod.parameters()) for name, mod in parts.items()}
        counts["total"] = sum(counts.values())
        return counts
