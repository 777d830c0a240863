"""One flat config drives every subcommand.

The file format is plain JSON with exactly the keys below; unknown keys are
rejected so typos cannot silently fall back to defaults. Tuples appear as
JSON lists. parse -> serialize round-trips losslessly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

_EPS_BAR_MODES = ("analytic", "zero")


@dataclass(frozen=True)
class Config:
    seed: int = 0

    # training loop
    steps: int = 2000
    batch_size: int = 4
    learning_rate: float = 2e-4
    lr_decay: str = "cosine"  # initial lr decays over the step budget
    grad_clip: float = 1.0
    log_every: int = 50
    checkpoint_every: int = 500
    patch_size: int = 64
    augment: bool = False

    # noise schedule
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    # sampling
    sample_steps: int = 10
    deterministic_sampler: bool = True

    # network
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    num_res_blocks: int = 2
    afi_levels: tuple = (2,)
    time_embed_dim: int = 128
    image_channels: int = 3

    # losses
    omega: tuple = (1.0, 0.3, 1.0)
    tau: tuple = (0.9, 0.1)
    eps_bar_mode: str = "analytic"
    squared_norms: bool = False
    feature_seed: int = 17
    feature_base: int = 16

    # corrector / decomposition
    racm_width: int = 32
    retinex_sigma: float = 3.0
    retinex_eps: float = 1e-4

    # component toggles (ablation wiring)
    use_h2l: bool = True
    use_afi: bool = True
    use_racm: bool = True

    # synthetic degradation ranges
    gamma_range: tuple = (1.5, 3.5)
    scale_range: tuple = (0.1, 0.4)
    noise_sigma_range: tuple = (0.01, 0.05)
    color_cast_strength: tuple = (0.0, 0.05)

    # reserved: weight averaging is not implemented, 0 disables it
    ema_decay: float = 0.0

    def __post_init__(self):
        if self.eps_bar_mode not in _EPS_BAR_MODES:
            raise ValueError(f"eps_bar_mode must be one of {_EPS_BAR_MODES}")
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError("lr_decay must be 'none' or 'cosine'")
        for name in ("steps", "batch_size", "timesteps", "patch_size", "sample_steps",
                     "base_channels", "time_embed_dim", "num_res_blocks",
                     "log_every", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        kwargs = {}
        for k, v in d.items():
            default = known[k].default
            kwargs[k] = tuple(v) if isinstance(default, tuple) else v
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "Config":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def replace(self, **overrides) -> "Config":
        fields = {f.name: f.default for f in dataclasses.fields(self)}
        clean = {}
        for k, v in overrides.items():
            if k not in fields:
                raise ValueError(f"unknown config key: {k}")
            clean[k] = tuple(v) if isinstance(fields[k], tuple) and v is not None else v
        return dataclasses.replace(self, **clean)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            f.write(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
