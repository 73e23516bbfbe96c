"""Invariant-region joint sampling.

After each reverse step the region outside every edited object is replaced
by the source video diffused to the same timestep, so the sampler keeps
denoising a state whose background is the source's own marginal.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .scheduler import LatentState, NoiseSchedule, ddim_step, diffuse_forward
from .seeding import gaussian

__all__ = ["IrjsConfig", "blend", "source_noise", "irjs_step"]


@dataclass(frozen=True)
class IrjsConfig:
    enabled: bool = True
    mode: str = "deterministic"
    blend_final_step: bool = True

    def __post_init__(self):
        if self.mode not in ("deterministic", "stochastic"):
            raise ValueError(f"mode must be 'deterministic' or 'stochastic', got {self.mode!r}")


def _mask_like(mask, x: torch.Tensor) -> torch.Tensor:
    m = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask)
    m = m.to(x.dtype)
    if x.ndim == 4 and m.ndim == 3:
        m = m[:, None]          # (F, H, W) grids broadcast over channels
    try:
        torch.broadcast_shapes(m.shape, x.shape)
    except RuntimeError:
        raise ValueError(f"mask shape {tuple(m.shape)} does not broadcast to {tuple(x.shape)}") from None
    return m


def blend(x_prev: LatentState, v_prev: LatentState, union_m) -> LatentState:
    """Keep ``x_prev`` where the mask is 1 and ``v_prev`` where it is 0."""
    if x_prev.t != v_prev.t:
        raise ValueError(f"timestep mismatch: {x_prev.t} vs {v_prev.t}")
    if tuple(x_prev.sample.shape) != tuple(v_prev.sample.shape):
        raise ValueError("shape mismatch between generated and source states")
    m = _mask_like(union_m, x_prev.sample)
    # torch.where keeps the selected entries bit-exact
    out = torch.where(m.bool(), x_prev.sample, v_prev.sample)
    return LatentState(out, x_prev.t)


def source_noise(shape, t_prev: int, cfg: IrjsConfig, seed: int, dtype=torch.float32) -> torch.Tensor:
    """Forward-diffusion noise for the source at ``t_prev``.

    Stochastic mode draws fresh noise per timestep; deterministic mode reuses
    one run-level draw.
    """
    key = t_prev if cfg.mode == "stochastic" else 0
    return gaussian(shape, seed, key, f"irjs-{cfg.mode}", dtype=dtype)


def irjs_step(x_t: LatentState, eps_pred, v0, union_m, t: int, t_prev: int,
              schedule: NoiseSchedule, cfg: IrjsConfig, rng_seed: int,
              eta: float | None = None) -> LatentState:
    """Sampler step from ``t`` to ``t_prev`` followed by the invariant-region blend.

    ``eta`` defaults to 0 in deterministic mode and 1 (ancestral DDPM) in
    stochastic mode.
    """
    if eta is None:
        eta = 1.0 if cfg.mode == "stochastic" else 0.0
    if cfg.mode == "stochastic" and eta <= 0.0:
        raise ValueError("stochastic mode needs eta > 0")
    x_prev = ddim_step(x_t, eps_pred, t, t_prev, eta, schedule, rng_seed)
    if not cfg.enabled:
        return x_prev
    if t_prev == 0 and not cfg.blend_final_step:
        return x_prev
    eps = source_noise(v0.shape, t_prev, cfg, rng_seed, dtype=v0.dtype)
    v_prev = diffuse_forward(v0, t_prev, eps, schedule)
    return blend(x_prev, v_prev, union_m)
