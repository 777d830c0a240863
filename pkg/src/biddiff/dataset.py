"""Paired data supply: synthetic low-light degradation and LOL-style loading.

Synthetic pairs come from a physical forward model (gamma curve, brightness
scale, mild color cast, additive Gaussian noise) applied to source images;
every draw is keyed by (params.seed, sample_seed) so a manifest entry can be
regenerated bit-exactly. Disk datasets use the layout

    <root>/low/<name>.png
    <root>/high/<name>.png

with filename-matched pairs. All images at rest are 8-bit PNG; in memory
they are float32 tensors in [0, 1], shaped (c, h, w) or batched (b, c, h, w).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .seeding import make_generator

_DEGRADE_TAG = 0xDE64
_BATCH_TAG = 0xBA7C
_SOURCE_TAG = 0x50C0


def load_image(path) -> torch.Tensor:
    """Read an image file into a float32 (c, h, w) tensor in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(x: torch.Tensor, path) -> None:
    """Write a (c, h, w) [0, 1] tensor as an 8-bit PNG."""
    arr = (x.detach().clamp(0, 1).permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


@dataclass(frozen=True)
class DegradationParams:
    """Ranges the per-sample degradation draws from, plus the base seed."""

    gamma_range: tuple = (1.5, 3.5)
    scale_range: tuple = (0.1, 0.4)
    noise_sigma_range: tuple = (0.01, 0.05)
    color_cast_strength: tuple = (0.0, 0.05)
    seed: int = 0

    def __post_init__(self):
        for name in ("gamma_range", "scale_range", "noise_sigma_range", "color_cast_strength"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: low {lo} > high {hi}")
        if self.gamma_range[0] <= 0:
            raise ValueError("gamma must be positive")
        if self.scale_range[0] < 0 or self.noise_sigma_range[0] < 0:
            raise ValueError("scale and noise sigma must be nonnegative")
        if self.color_cast_strength[0] < 0 or self.color_cast_strength[1] > 1:
            raise ValueError("color cast strength must lie in [0, 1]")


@dataclass(frozen=True)
class PairedSample:
    """Aligned low/normal-light batch with provenance."""

    x_l: torch.Tensor
    x_h: torch.Tensor
    id: tuple
    source: str  # "synthetic" | "disk"

    def __post_init__(self):
        if self.x_l.shape != self.x_h.shape:
            raise ValueError("x_l and x_h must shape-match")


def _uniform(gen: torch.Generator, lo: float, hi: float) -> float:
    return float(torch.empty((), dtype=torch.float64).uniform_(lo, hi, generator=gen))


def draw_degradation(params: DegradationParams, sample_seed: int, channels: int = 3) -> dict:
    """Deterministically draw one sample's degradation parameters."""
    gen = make_generator(params.seed, sample_seed, _DEGRADE_TAG)
    drawn = {
        "gamma": _uniform(gen, *params.gamma_range),
        "scale": _uniform(gen, *params.scale_range),
        "sigma": _uniform(gen, *params.noise_sigma_range),
        "cast": _uniform(gen, *params.color_cast_strength),
    }
    drawn["channel_offsets"] = [
        _uniform(gen, -1.0, 1.0) for _ in range(channels)
    ]
    return drawn


def degrade(x_h: torch.Tensor, params: DegradationParams, sample_seed: int) -> torch.Tensor:
    """Apply the seeded low-light forward model to a [0, 1] image (batch).

    out = clamp(scale * x_h**gamma * (1 + cast * channel_offsets) + noise)
    """
    if x_h.min() < 0 or x_h.max() > 1:
        raise ValueError("degrade input must lie in [0, 1]")
    squeeze = x_h.ndim == 3
    x = x_h.unsqueeze(0) if squeeze else x_h
    drawn = draw_degradation(params, sample_seed, channels=x.shape[1])
    offsets = torch.tensor(drawn["channel_offsets"], dtype=x.dtype).view(1, -1, 1, 1)
    # noise generator continues the same stream, after the parameter draws
    gen = make_generator(params.seed, sample_seed, _DEGRADE_TAG, 1)
    noise = torch.randn(x.shape, dtype=x.dtype, generator=gen)
    out = drawn["scale"] * x.pow(drawn["gamma"]) * (1.0 + drawn["cast"] * offsets)
    out = (out + drawn["sigma"] * noise).clamp(0.0, 1.0)
    return out.squeeze(0) if squeeze else out


def synthesize_source_images(n: int, size: int = 64, seed: int = 0) -> list:
    """Procedural normal-light source images: smooth fields plus shapes.

    Gives the degradation generator something with edges, texture and color
    variety so enhancement metrics are meaningful without any real dataset.
    """
    images = []
    yy, xx = torch.meshgrid(
        torch.arange(size, dtype=torch.float32),
        torch.arange(size, dtype=torch.float32),
        indexing="ij",
    )
    for i in range(n):
        gen = make_generator(seed, i, _SOURCE_TAG)
        coarse = torch.rand((1, 3, 4, 4), generator=gen)
        img = torch.nn.functional.interpolate(
            coarse, size=(size, size), mode="bicubic", align_corners=False
        )[0]
        n_rects = int(torch.randint(2, 5, (), generator=gen))
        for _ in range(n_rects):
            y0, x0 = (int(torch.randint(0, size - 8, (), generator=gen)) for _ in range(2))
            h = int(torch.randint(6, size // 2, (), generator=gen))
            w = int(torch.randint(6, size // 2, (), generator=gen))
            color = torch.rand((3, 1, 1), generator=gen)
            img[:, y0 : min(y0 + h, size), x0 : min(x0 + w, size)] = color
        n_discs = int(torch.randint(1, 3, (), generator=gen))
        for _ in range(n_discs):
            cy = _uniform(gen, 0, size)
            cx = _uniform(gen, 0, size)
            r = _uniform(gen, size / 12, size / 5)
            mask = ((yy - cy) ** 2 + (xx - cx) ** 2) < r**2
            color = torch.rand((3, 1, 1), generator=gen)
            img[:, mask] = color.expand(3, size, size)[:, mask]
        lo, hi = img.amin(), img.amax()
        img = 0.15 + 0.8 * (img - lo) / (hi - lo + 1e-8)
        images.append(img.clamp(0.0, 1.0))
    return images


def make_synthetic_set(
    source_images: Sequence[torch.Tensor],
    n: int,
    params: DegradationParams,
    out_dir,
) -> list:
    """Write n degraded/clean pairs plus a JSONL manifest; returns the manifest.

    Sample i reuses source i % len(sources) and sample seed i, so rerunning
    with the same inputs reproduces every file bit-exactly.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not source_images:
        raise ValueError("need at least one source image")
    out_dir = Path(out_dir)
    manifest = []
    for i in range(n):
        x_h = source_images[i % len(source_images)].clamp(0.0, 1.0)
        x_l = degrade(x_h, params, sample_seed=i)
        sample_id = f"{i:04d}"
        try:
            save_image(x_h, out_dir / "high" / f"{sample_id}.png")
            save_image(x_l, out_dir / "low" / f"{sample_id}.png")
        except OSError as e:
            raise OSError(f"failed writing pair {sample_id} under {out_dir}: {e}") from e
        drawn = draw_degradation(params, i, channels=x_h.shape[0])
        manifest.append(
            {
                "id": sample_id,
                "seed": i,
                "gamma": drawn["gamma"],
                "scale": drawn["scale"],
                "sigma": drawn["sigma"],
                "cast": drawn["cast"],
            }
        )
    with open(out_dir / "manifest.jsonl", "w") as f:
        for entry in manifest:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    return manifest


class PairedDirDataset:
    """Filename-matched low/high pairs under one root, cached in memory."""

    def __init__(self, root):
        self.root = Path(root)
        low_dir, high_dir = self.root / "low", self.root / "high"
        if not low_dir.is_dir() or not high_dir.is_dir():
            raise FileNotFoundError(f"{self.root} must contain low/ and high/ directories")
        lows = {p.name: p for p in sorted(low_dir.glob("*.png"))}
        highs = {p.name: p for p in sorted(high_dir.glob("*.png"))}
        orphans = sorted(set(lows) ^ set(highs))
        if orphans:
            raise ValueError(f"unmatched low/high filenames: {orphans}")
        if not lows:
            raise ValueError(f"no .png pairs found under {self.root}")
        self.names = sorted(lows)
        self._low_paths = lows
        self._high_paths = highs
        self._cache: dict = {}

    def __len__(self) -> int:
        return len(self.names)

    def load_pair(self, idx: int):
        name = self.names[idx]
        if name not in self._cache:
            self._cache[name] = (
                load_image(self._low_paths[name]),
                load_image(self._high_paths[name]),
            )
        return self._cache[name]

    def batch_at(
        self,
        index: int,
        batch_size: int,
        patch_size: int,
        augment: bool = False,
        seed: int = 0,
    ) -> PairedSample:
        """Deterministic batch for a given step index.

        All randomness (pair choice, crop window, flip) derives from
        (seed, index) alone, so batches can be prefetched or replayed in any
        order without changing their content.
        """
        gen = make_generator(seed, index, _BATCH_TAG)
        lows, highs, ids = [], [], []
        for _ in range(batch_size):
            k = int(torch.randint(0, len(self.names), (), generator=gen))
            x_l, x_h = self.load_pair(k)
            c, h, w = x_l.shape
            if h < patch_size or w < patch_size:
                raise ValueError(
                    f"image {self._low_paths[self.names[k]]} is {h}x{w}, "
                    f"smaller than patch size {patch_size}"
                )
            y0 = int(torch.randint(0, h - patch_size + 1, (), generator=gen))
            x0 = int(torch.randint(0, w - patch_size + 1, (), generator=gen))
            cl = x_l[:, y0 : y0 + patch_size, x0 : x0 + patch_size]
            ch_ = x_h[:, y0 : y0 + patch_size, x0 : x0 + patch_size]
            if augment and bool(torch.randint(0, 2, (), generator=gen)):
                cl, ch_ = cl.flip(-1), ch_.flip(-1)
            lows.append(cl)
            highs.append(ch_)
            ids.append(self.names[k])
        return PairedSample(
            x_l=torch.stack(lows), x_h=torch.stack(highs), id=tuple(ids), source="disk"
        )


def load_paired_dir(
    root,
    patch_size: int,
    augment: bool = False,
    seed: int = 0,
    batch_size: int = 1,
    num_batches: Optional[int] = None,
) -> Iterator[PairedSample]:
    """Yield aligned random-crop batches from a low/high directory pair."""
    ds = PairedDirDataset(root)
    i = 0
    while num_batches is None or i < num_batches:
        yield ds.batch_at(i, batch_size, patch_size, augment=augment, seed=seed)
        i += 1
