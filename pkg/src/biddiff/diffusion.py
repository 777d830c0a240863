"""Core diffusion mechanics: noise schedules, forward noising, few-step sampling.

Conventions used throughout:

- Forward marginal:  x_t = sqrt(a_bar[t]) * x_0 + sqrt(1 - a_bar[t]) * eps,
  with eps ~ N(0, I) and a_bar the cumulative product of alpha = 1 - beta.
- Images inside the diffusion core live in [-1, 1]; conversion to/from the
  [0, 1] I/O range happens at module edges (see `to_core` / `to_unit`).
- All schedule tables are computed in float64 and kept that way; per-timestep
  coefficients are cast to the image dtype only when gathered.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .errors import NumericError
from .seeding import make_generator

CORE_RANGE = (-1.0, 1.0)


def to_core(x: torch.Tensor) -> torch.Tensor:
    """Map a [0, 1] image into the [-1, 1] diffusion range."""
    return x * 2.0 - 1.0


def to_unit(x: torch.Tensor) -> torch.Tensor:
    """Map a [-1, 1] core image back to [0, 1]."""
    return (x + 1.0) / 2.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta / alpha / alpha_bar / sigma tables for T steps.

    sigma[t] is the ancestral posterior standard deviation
    sqrt(beta[t] * (1 - a_bar[t-1]) / (1 - a_bar[t])) with sigma[0] = 0;
    deterministic sampling overrides it with 0.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "sigma"):
            arr = getattr(self, name)
            if arr.shape != (self.T,):
                raise ValueError(f"{name} must have shape ({self.T},), got {arr.shape}")


def make_schedule(
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 2e-2,
    kind: str = "linear",
) -> NoiseSchedule:
    """Build a noise schedule of T steps with betas linear in t."""
    if kind != "linear":
        raise ValueError(f"unknown schedule kind: {kind!r}")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.zeros(T, dtype=np.float64)
    if T > 1:
        sigma[1:] = np.sqrt(beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]))
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def _as_timesteps(t, batch: int, T: int) -> torch.Tensor:
    """Normalize t (int or 1-D tensor) to a long tensor of shape (batch,)."""
    if isinstance(t, int):
        tt = torch.full((batch,), t, dtype=torch.long)
    else:
        tt = torch.as_tensor(t, dtype=torch.long)
        if tt.ndim == 0:
            tt = tt.expand(batch).clone()
        if tt.shape != (batch,):
            raise ValueError(f"timesteps must have shape ({batch},), got {tuple(tt.shape)}")
    if tt.min() < 0 or tt.max() >= T:
        raise ValueError(f"timestep out of range [0, {T}): {tt.min()}..{tt.max()}")
    return tt


def gather_coeff(table: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Gather table[t] as a (b, 1, 1, 1) tensor matching `like`'s dtype."""
    vals = torch.from_numpy(table).to(like.dtype)[t]
    return vals.view(-1, *([1] * (like.ndim - 1)))


@dataclass(frozen=True)
class DiffusionSample:
    """A noised image plus the exact noise and timesteps that produced it."""

    x_t: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor


def forward_diffuse(
    x_0: torch.Tensor,
    t,
    schedule: NoiseSchedule,
    noise: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> DiffusionSample:
    """Sample the forward marginal q(x_t | x_0) in closed form.

    If `noise` is omitted it is drawn from `generator` (or a fresh default
    generator), which keeps the draw seedable.
    """
    lo, hi = CORE_RANGE
    if x_0.min() < lo - 1e-6 or x_0.max() > hi + 1e-6:
        raise ValueError(f"x_0 outside core range [{lo}, {hi}]")
    tt = _as_timesteps(t, x_0.shape[0], schedule.T)
    if noise is None:
        noise = torch.randn(x_0.shape, dtype=x_0.dtype, generator=generator)
    elif noise.shape != x_0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != x_0 shape {tuple(x_0.shape)}")
    a_bar = gather_coeff(schedule.alpha_bar, tt, x_0)
    x_t = torch.sqrt(a_bar) * x_0 + torch.sqrt(1.0 - a_bar) * noise
    return DiffusionSample(x_t=x_t, eps=noise, t=tt)


def estimate_x0(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t,
    schedule: NoiseSchedule,
    clamp: bool = True,
) -> torch.Tensor:
    """Invert the forward marginal: x0_hat = (x_t - sqrt(1-a_bar)*eps) / sqrt(a_bar).

    Clamping to the core range is on by default (loss inputs); the sampler
    calls this with clamp=False to avoid biasing its update.
    """
    if eps_hat.shape != x_t.shape:
        raise ValueError(f"eps_hat shape {tuple(eps_hat.shape)} != x_t shape {tuple(x_t.shape)}")
    tt = _as_timesteps(t, x_t.shape[0], schedule.T)
    a_bar = gather_coeff(schedule.alpha_bar, tt, x_t)
    x0 = (x_t - torch.sqrt(1.0 - a_bar) * eps_hat) / torch.sqrt(a_bar)
    if clamp:
        x0 = x0.clamp(*CORE_RANGE)
    return x0


def sampling_timesteps(T: int, steps: int) -> np.ndarray:
    """Uniformly strided decreasing timestep subsequence of length `steps`."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if steps > T:
        raise ValueError(f"steps ({steps}) must not exceed T ({T})")
    return np.round(np.linspace(T - 1, 0, steps)).astype(np.int64)


def sample(
    eps_model: Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor],
    condition: torch.Tensor,
    schedule: NoiseSchedule,
    steps: int = 10,
    seed: int = 0,
    deterministic: bool = True,
) -> torch.Tensor:
    """Reverse-sample an image from pure noise, conditioned on `condition`.

    Walks a strided timestep subsequence; at each visited step the model's
    noise estimate yields an x_0 estimate and the update either jumps
    deterministically toward the next step's marginal (the default) or takes
    the stochastic ancestral step. The final image is clamped to the core
    range. `condition` must be in the core range already.
    """
    ts = sampling_timesteps(schedule.T, steps)
    gen = make_generator(seed)
    x = torch.randn(condition.shape, dtype=condition.dtype, generator=gen)
    b = condition.shape[0]
    for i, t in enumerate(ts):
        t_batch = torch.full((b,), int(t), dtype=torch.long)
        eps_hat = eps_model(x, condition, t_batch)
        if eps_hat.shape != x.shape:
            raise ValueError(
                f"predictor output shape {tuple(eps_hat.shape)} != latent shape {tuple(x.shape)}"
            )
        if not torch.isfinite(eps_hat).all():
            raise NumericError(f"non-finite noise prediction at sampling step {i} (t={int(t)})")
        a_t = float(schedule.alpha_bar[t])
        a_prev = float(schedule.alpha_bar[ts[i + 1]]) if i + 1 < len(ts) else 1.0
        x0 = estimate_x0(x, eps_hat, t_batch, schedule, clamp=False)
        if deterministic:
            x = np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * eps_hat
        else:
            alpha_eff = a_t / a_prev
            beta_eff = 1.0 - alpha_eff
            var = beta_eff * (1.0 - a_prev) / (1.0 - a_t)
            mean = (
                np.sqrt(a_prev) * beta_eff / (1.0 - a_t) * x0
                + np.sqrt(alpha_eff) * (1.0 - a_prev) / (1.0 - a_t) * x
            )
            z = torch.randn(x.shape, dtype=x.dtype, generator=gen)
            x = mean + np.sqrt(var) * z
    return x.clamp(*CORE_RANGE)
