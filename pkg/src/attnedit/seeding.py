"""Deterministic noise derivation.

Every random draw in a run is addressed by ``(seed, timestep, purpose)``, so
noise for any step can be produced lazily, ahead of time, or in parallel and
the bits come out the same.
"""
from __future__ import annotations

import zlib

import numpy as np
import torch

__all__ = ["derive_rng", "gaussian"]


def _purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def derive_rng(seed: int, timestep: int, purpose: str) -> np.random.Generator:
    """Return a numpy generator keyed on ``(seed, timestep, purpose)``."""
    if seed < 0 or timestep < 0:
        raise ValueError("seed and timestep must be non-negative")
    ss = np.random.SeedSequence([int(seed), int(timestep), _purpose_key(purpose)])
    return np.random.Generator(np.random.PCG64(ss))


def gaussian(shape, seed: int, timestep: int, purpose: str,
             dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Standard normal tensor drawn from the keyed generator."""
    z = derive_rng(seed, timestep, purpose).standard_normal(tuple(shape))
    return torch.from_numpy(z).to(dtype)
