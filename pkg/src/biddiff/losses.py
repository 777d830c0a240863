"""Training objective: bidirectional diffusion loss, content loss, SSIM.

The total objective is

    omega_1 * L_diff + omega_2 * L_content + omega_3 * L_structural

with L_structural = 1 - SSIM(enhanced, reference). Norms written ||.||_2 are
batch means of per-sample l2 norms over flattened tensors (non-squared); a
`squared` flag switches to mean squared norms for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule, _as_timesteps, gather_coeff
from .errors import NumericError
from .seeding import make_generator


@dataclass(frozen=True)
class LossWeights:
    """Weights for the total objective (omega) and the content terms (tau)."""

    omega: tuple = (1.0, 0.3, 1.0)
    tau: tuple = (0.9, 0.1)

    def __post_init__(self):
        if len(self.omega) != 3 or len(self.tau) != 2:
            raise ValueError("omega must have 3 entries and tau 2")
        if any(w < 0 for w in self.omega) or any(w < 0 for w in self.tau):
            raise ValueError("loss weights must be nonnegative")


def _check_same_shape(name_a: str, a: torch.Tensor, name_b: str, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(
            f"{name_a} shape {tuple(a.shape)} != {name_b} shape {tuple(b.shape)}"
        )


def flat_norm(x: torch.Tensor, squared: bool = False) -> torch.Tensor:
    """Batch mean of per-sample l2 norms (optionally squared) of flattened x."""
    norms = x.flatten(1).norm(dim=1)
    if squared:
        norms = norms**2
    return norms.mean()


def diffusion_loss(
    eps_true: torch.Tensor,
    eps_l2h: torch.Tensor,
    eps_h2l: torch.Tensor,
    eps_bar: torch.Tensor,
    squared: bool = False,
) -> torch.Tensor:
    """||eps_true - eps_l2h|| + ||eps_bar - (eps_h2l - eps_l2h)||.

    The first term trains the enhancement path's noise estimate; the second
    constrains the difference between the two paths' estimates to the target
    noise difference eps_bar.
    """
    _check_same_shape("eps_true", eps_true, "eps_l2h", eps_l2h)
    _check_same_shape("eps_true", eps_true, "eps_h2l", eps_h2l)
    _check_same_shape("eps_true", eps_true, "eps_bar", eps_bar)
    return flat_norm(eps_true - eps_l2h, squared) + flat_norm(
        eps_bar - (eps_h2l - eps_l2h), squared
    )


def make_eps_bar(
    x_h: torch.Tensor,
    x_l: torch.Tensor,
    t,
    schedule: NoiseSchedule,
    mode: str = "analytic",
) -> torch.Tensor:
    """Target for the difference between the two paths' noise estimates.

    analytic (default): sqrt(a_bar_t) / sqrt(1 - a_bar_t) * (x_h - x_l) --
    the unique difference under which each path's estimate inverts the
    forward marginal to its own clean image. zero: a pure symmetry
    constraint (the two estimates are pushed to coincide).
    """
    _check_same_shape("x_h", x_h, "x_l", x_l)
    if mode == "zero":
        return torch.zeros_like(x_h)
    if mode != "analytic":
        raise ValueError(f"unknown eps_bar mode: {mode!r}")
    tt = _as_timesteps(t, x_h.shape[0], schedule.T)
    a_bar = gather_coeff(schedule.alpha_bar, tt, x_h)
    if (a_bar >= 1.0).any():
        raise NumericError("alpha_bar == 1 makes the noise-difference target singular")
    return torch.sqrt(a_bar) / torch.sqrt(1.0 - a_bar) * (x_h - x_l)


class FeaturePyramid(nn.Module):
    """Frozen 5-tap convolutional feature extractor for the content loss.

    A seeded, randomly initialized strided pyramid: tap 0 at input resolution,
    taps 1..4 each halving the spatial size. Parameters never train, so the
    extractor is a fixed measuring stick for the whole run. A pretrained
    extractor can be swapped in; `provenance` records which one is in use.
    """

    def __init__(self, in_channels: int = 3, base: int = 16, seed: int = 0,
                 provenance: str = "random-init"):
        super().__init__()
        self.seed = seed
        self.provenance = provenance
        widths = [base, base * 2, base * 4, base * 4, base * 4]
        gen = make_generator(seed, 0xFEA7)
        convs = []
        prev = in_channels
        for i, w in enumerate(widths):
            conv = nn.Conv2d(prev, w, 3, stride=1 if i == 0 else 2, padding=1)
            with torch.no_grad():
                fan_in = prev * 9
                conv.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                conv.bias.zero_()
            convs.append(conv)
            prev = w
        self.convs = nn.ModuleList(convs)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        h = x
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
            taps.append(h)
        return taps


def content_loss(
    I_E: torch.Tensor,
    I_D: torch.Tensor,
    x_h: torch.Tensor,
    x_l: torch.Tensor,
    phi: FeaturePyramid,
    tau: tuple = (0.9, 0.1),
    squared: bool = False,
) -> torch.Tensor:
    """Multi-scale feature distance of the two denoised outputs to their references.

    Sum over the 5 taps of tau_1 * ||phi(I_E) - phi(x_h)|| +
    tau_2 * ||phi(I_D) - phi(x_l)||. A zero tau weight skips its branch
    entirely (its inputs are never read).
    """
    total = torch.zeros(())
    if tau[0] != 0.0:
        _check_same_shape("I_E", I_E, "x_h", x_h)
        feats_e, feats_h = phi(I_E), phi(x_h)
        total = total + tau[0] * sum(
            flat_norm(fe - fh, squared) for fe, fh in zip(feats_e, feats_h)
        )
    if tau[1] != 0.0:
        _check_same_shape("I_D", I_D, "x_l", x_l)
        feats_d, feats_l = phi(I_D), phi(x_l)
        total = total + tau[1] * sum(
            flat_norm(fd - fl, squared) for fd, fl in zip(feats_d, feats_l)
        )
    return total


def _gaussian_window(size: int, sigma: float, channels: int) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float32) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    win = torch.outer(g, g)
    return win.expand(channels, 1, size, size).contiguous()


def ssim(
    a: torch.Tensor,
    b: torch.Tensor,
    window_sigma: float = 1.5,
    C1: float = 0.01**2,
    C2: float = 0.03**2,
    window_size: int = 11,
) -> torch.Tensor:
    """Mean structural similarity over valid local Gaussian windows.

    Inputs are (b, c, h, w) in [0, 1] (dynamic range 1). Windows are fully
    contained in the image, so images smaller than the window are an error.
    """
    _check_same_shape("a", a, "b", b)
    if a.shape[-2] < window_size or a.shape[-1] < window_size:
        raise ValueError(
            f"image {tuple(a.shape[-2:])} smaller than the {window_size}x{window_size} SSIM window"
        )
    c = a.shape[1]
    win = _gaussian_window(window_size, window_sigma, c).to(a.dtype)
    mu_a = F.conv2d(a, win, groups=c)
    mu_b = F.conv2d(b, win, groups=c)
    mu_aa, mu_bb, mu_ab = mu_a**2, mu_b**2, mu_a * mu_b
    var_a = F.conv2d(a * a, win, groups=c) - mu_aa
    var_b = F.conv2d(b * b, win, groups=c) - mu_bb
    cov = F.conv2d(a * b, win, groups=c) - mu_ab
    ssim_map = ((2 * mu_ab + C1) * (2 * cov + C2)) / ((mu_aa + mu_bb + C1) * (var_a + var_b + C2))
    return ssim_map.mean()


def total_loss(
    l_diff: torch.Tensor,
    l_content: torch.Tensor,
    l_structural: torch.Tensor,
    weights: LossWeights = LossWeights(),
) -> torch.Tensor:
    """Weighted sum of the three objective parts; rejects non-finite parts."""
    parts = {"diff": l_diff, "content": l_content, "structural": l_structural}
    for name, part in parts.items():
        if not torch.isfinite(torch.as_tensor(part)).all():
            raise NumericError(f"non-finite loss part: {name}")
    w1, w2, w3 = weights.omega
    return w1 * l_diff + w2 * l_content + w3 * l_structural
