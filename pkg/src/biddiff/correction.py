"""Retinex decomposition and the reflection-aware correction module.

An image I in [0, 1] factors as I = R * (L + eps): L is a smoothed
max-channel illumination estimate, R the reflectance. The corrector uses R
as a color/structure prior to refine a denoised image with channel and
spatial attention; it is residual with a zero-initialized reconstruction
conv, so an untrained corrector is the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


def _gaussian_kernel1d(sigma: float, radius: int, dtype) -> torch.Tensor:
    coords = torch.arange(-radius, radius + 1, dtype=dtype)
    kernel = torch.exp(-(coords**2) / (2 * sigma**2))
    return kernel / kernel.sum()


def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with reflect padding. sigma=0 is a no-op.

    The nominal kernel radius is ceil(3*sigma); on images smaller than that
    it shrinks to the largest radius reflect padding allows.
    """
    if sigma <= 0:
        return x
    radius = max(1, int(math.ceil(3.0 * sigma)))
    c, h, w = x.shape[1:]
    rx, ry = min(radius, w - 1), min(radius, h - 1)
    if rx > 0:
        kx = _gaussian_kernel1d(sigma, rx, x.dtype).view(1, 1, 1, -1).expand(c, 1, 1, -1)
        x = F.conv2d(F.pad(x, (rx, rx, 0, 0), mode="reflect"), kx, groups=c)
    if ry > 0:
        ky = _gaussian_kernel1d(sigma, ry, x.dtype).view(1, 1, -1, 1).expand(c, 1, -1, 1)
        x = F.conv2d(F.pad(x, (0, 0, ry, ry), mode="reflect"), ky, groups=c)
    return x


@dataclass(frozen=True)
class RetinexDecomposition:
    """Reflectance/illumination split. R_raw * (L + eps) rebuilds the input
    exactly; R is R_raw clamped to [0, 1]."""

    R: torch.Tensor
    L: torch.Tensor
    eps: float
    R_raw: torch.Tensor


def retinex_decompose(
    I: torch.Tensor, smoothing_sigma: float = 3.0, eps: float = 1e-4
) -> RetinexDecomposition:
    """Split an image into reflectance and a smooth single-channel illumination.

    L is the Gaussian-blurred max over color channels; R = I / (L + eps).
    Differentiable, so it can sit inside a training graph.
    """
    if I.min() < 0 or I.max() > 1:
        raise ValueError("retinex input must lie in [0, 1]")
    if smoothing_sigma < 0:
        raise ValueError("smoothing_sigma must be >= 0")
    if eps <= 0:
        raise ValueError("eps must be > 0")
    max_c = I.max(dim=1, keepdim=True).values
    L = gaussian_blur(max_c, smoothing_sigma)
    R_raw = I / (L + eps)
    return RetinexDecomposition(R=R_raw.clamp(0.0, 1.0), L=L, eps=eps, R_raw=R_raw)


class ChannelAttention(nn.Module):
    """Squeeze-excitation gate: global average pool -> MLP -> sigmoid."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.fc1 = nn.Conv2d(channels, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, channels, 1)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(pooled))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


class SpatialAttention(nn.Module):
    """Per-pixel gate from channel mean/max statistics.

    The fusion conv uses circular padding so the map commutes exactly with
    cyclic spatial shifts.
    """

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(
            2, 1, kernel_size, padding=kernel_size // 2, padding_mode="circular"
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        stats = torch.cat(
            [x.mean(dim=1, keepdim=True), x.max(dim=1, keepdim=True).values], dim=1
        )
        return torch.sigmoid(self.conv(stats))


class ReflectionAwareCorrection(nn.Module):
    """Post-denoising color/exposure corrector guided by the reflectance prior.

    Both branches are one conv+ReLU; the reflectance branch is gated per
    channel, the image branch per pixel, and their Hadamard product is
    reconstructed and added back onto the input. Operates in [0, 1].
    """

    def __init__(
        self,
        channels: int = 3,
        width: int = 32,
        smoothing_sigma: float = 3.0,
        eps: float = 1e-4,
    ):
        super().__init__()
        self.smoothing_sigma = smoothing_sigma
        self.eps = eps
        self.img_conv = nn.Conv2d(channels, width, 3, padding=1)
        self.ref_conv = nn.Conv2d(channels, width, 3, padding=1)
        self.channel_attn = ChannelAttention(width)
        self.spatial_attn = SpatialAttention()
        self.recon = nn.Conv2d(width, channels, 3, padding=1)
        nn.init.zeros_(self.recon.weight)
        nn.init.zeros_(self.recon.bias)

    def _features(self, image: torch.Tensor):
        if image.min() < 0 or image.max() > 1:
            raise ValueError("corrector input must lie in [0, 1]")
        R = retinex_decompose(image, self.smoothing_sigma, self.eps).R
        f_img = F.relu(self.img_conv(image))
        f_ref = F.relu(self.ref_conv(R))
        return f_img, f_ref

    def gates(self, image: torch.Tensor):
        """(channel gate, spatial gate) for inspection/testing."""
        f_img, f_ref = self._features(image)
        return self.channel_attn.gate(f_ref + f_img), self.spatial_attn(f_img)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        f_img, f_ref = self._features(image)
        refined_ref = self.channel_attn(f_ref + f_img)
        spatial_gate = self.spatial_attn(f_img)
        fused = f_img * spatial_gate * refined_ref
        return (self.recon(fused) + image).clamp(0.0, 1.0)
