"""Deterministic seed derivation.

Everything stochastic in this package draws from a torch.Generator built out
of a tuple of integers (base seed, step index, ...). Deriving a fresh
generator per (seed, index) pair keeps sequences independent of consumption
order, so prefetching or resuming cannot change what gets drawn.
"""

from __future__ import annotations

import torch

_MASK64 = (1 << 64) - 1


def mix_seeds(*parts: int) -> int:
    """Fold integer parts into one 63-bit seed (splitmix64-style)."""
    acc = 0x9E3779B97F4A7C15
    for p in parts:
        acc = (acc + (int(p) & _MASK64)) & _MASK64
        z = acc
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        acc = z ^ (z >> 31)
    return acc & ((1 << 63) - 1)


def make_generator(*parts: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(mix_seeds(*parts))
    return gen
