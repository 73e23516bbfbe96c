"""Attention-refocusing guidance.

Two losses on the cross-attention maps of each word of interest pull the top
responses into the user region and push the top responses outside it toward
zero. One gradient step on the noisy sample per denoising timestep applies
them, with a step size that decays linearly over the run.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .denoiser import AttentionRecord, denoise
from .regions import MaskSet, k_for_mask, complement
from .scheduler import LatentState

__all__ = [
    "RadConfig",
    "RadLossReport",
    "top_k_mean",
    "inner_loss",
    "outer_loss",
    "rad_objective",
    "alpha_at",
    "rad_active",
    "rad_update",
    "rad_guidance_step",
    "RadGradientError",
]


class RadGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class RadConfig:
    word_indices: tuple
    fraction: float = 0.2
    alpha_start: float = 1.0
    alpha_end: float = 0.5
    apply_fraction: float = 1.0
    reuse_eps: bool = False

    def __post_init__(self):
        idx = tuple(sorted({int(j) for j in self.word_indices}))
        if not idx:
            raise ValueError("word_indices must be non-empty")
        if min(idx) < 0:
            raise ValueError("word indices must be non-negative")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must be in (0, 1]")
        if not (self.alpha_start >= self.alpha_end > 0.0):
            raise ValueError("need alpha_start >= alpha_end > 0")
        if not 0.0 < self.apply_fraction <= 1.0:
            raise ValueError("apply_fraction must be in (0, 1]")
        object.__setattr__(self, "word_indices", idx)

    def check_prompt_length(self, L: int) -> None:
        bad = [j for j in self.word_indices if j >= L]
        if bad:
            raise ValueError(f"word indices {bad} out of range for a {L}-token prompt")


@dataclass
class RadLossReport:
    inner: dict = field(default_factory=dict)
    outer: dict = field(default_factory=dict)

    @property
    def inner_total(self) -> float:
        return float(sum(self.inner.values()))

    @property
    def outer_total(self) -> float:
        return float(sum(self.outer.values()))

    @property
    def total(self) -> float:
        return self.inner_total + self.outer_total

    def to_dict(self) -> dict:
        return {"inner": {str(k): v for k, v in self.inner.items()},
                "outer": {str(k): v for k, v in self.outer.items()},
                "inner_total": self.inner_total, "outer_total": self.outer_total,
                "total": self.total}


def top_k_mean(values, k: int):
    """Mean of the ``k`` largest entries; ties go to the lowest flat index.

    Torch input stays differentiable and returns a 0-d tensor; anything else
    returns a float.
    """
    is_torch = isinstance(values, torch.Tensor)
    v = values.reshape(-1) if is_torch else torch.as_tensor(np.asarray(values, dtype=np.float64)).reshape(-1)
    if v.numel() == 0:
        raise ValueError("empty input")
    if not 1 <= k <= v.numel():
        raise ValueError(f"k={k} outside [1, {v.numel()}]")
    order = torch.sort(v, descending=True, stable=True).indices[:k]
    out = v[order].mean()
    return out if is_torch else float(out)


def _maps_and_masks(record: AttentionRecord, masks: MaskSet, j: int):
    maps = record.maps
    if maps.shape[0] != masks.num_frames:
        raise ValueError(f"record has {maps.shape[0]} frames, masks have {masks.num_frames}")
    if tuple(maps.shape[-2:]) != masks.resolution:
        raise ValueError(f"record resolution {tuple(maps.shape[-2:])} != mask resolution {masks.resolution}")
    if j >= maps.shape[1]:
        raise ValueError(f"word index {j} outside prompt of length {maps.shape[1]}")
    return maps[:, j], masks.for_word(j)


def _region_loss(record, masks, cfg, outside: bool) -> dict:
    out = {}
    for j in cfg.word_indices:
        amap, m = _maps_and_masks(record, masks, j)
        terms = []
        for i in range(amap.shape[0]):
            region = complement(m[i]) if outside else m[i]
            if not region.any():
                if outside:
                    warnings.warn(f"word {j} frame {i}: mask covers the frame; outer term is 0")
                    terms.append(amap[i].sum() * 0.0)
                    continue
                raise ValueError(f"word {j} frame {i}: degenerate mask")
            k = k_for_mask(region, cfg.fraction)
            weight = torch.as_tensor(region, dtype=amap.dtype)
            terms.append(top_k_mean(amap[i] * weight, k))
        mean = torch.stack(terms).mean()
        out[j] = mean if outside else 1.0 - mean
    return out


def inner_loss(record: AttentionRecord, masks: MaskSet, cfg: RadConfig) -> dict:
    """Per word: 1 minus the frame-mean of top-k in-mask attention."""
    return _region_loss(record, masks, cfg, outside=False)


def outer_loss(record: AttentionRecord, masks: MaskSet, cfg: RadConfig) -> dict:
    """Per word: frame-mean of top-k attention outside the mask."""
    return _region_loss(record, masks, cfg, outside=True)


def _objective(record, masks, cfg):
    inner = inner_loss(record, masks, cfg)
    outer = outer_loss(record, masks, cfg)
    total = sum(inner.values()) + sum(outer.values())
    return total, inner, outer


def _report(inner: dict, outer: dict) -> RadLossReport:
    return RadLossReport({j: float(v.detach()) for j, v in inner.items()},
                         {j: float(v.detach()) for j, v in outer.items()})


def rad_objective(record: AttentionRecord, masks: MaskSet, cfg: RadConfig) -> RadLossReport:
    _, inner, outer = _objective(record, masks, cfg)
    return _report(inner, outer)


def alpha_at(step_index: int, total_steps: int, cfg: RadConfig) -> float:
    if not 0 <= step_index < total_steps:
        raise ValueError(f"step_index {step_index} outside [0, {total_steps})")
    if total_steps == 1:
        return cfg.alpha_start
    return cfg.alpha_start + (cfg.alpha_end - cfg.alpha_start) * step_index / (total_steps - 1)


def rad_active(step_index: int, total_steps: int, cfg: Optional[RadConfig]) -> bool:
    """Guidance runs on the first ``ceil(apply_fraction * total_steps)`` steps."""
    if cfg is None:
        return False
    return step_index < math.ceil(cfg.apply_fraction * total_steps - 1e-9)


def rad_update(x: LatentState, grad, alpha: float) -> LatentState:
    if tuple(grad.shape) != tuple(x.sample.shape):
        raise ValueError(f"gradient shape {tuple(grad.shape)} != sample shape {tuple(x.sample.shape)}")
    if not torch.isfinite(torch.as_tensor(grad)).all():
        raise RadGradientError(f"non-finite gradient at timestep {x.t}")
    return LatentState(x.sample - alpha * grad, x.t)


def rad_gradient(x: LatentState, t: int, emb, w, masks: MaskSet, cfg: RadConfig):
    """Return ``(grad, eps_at_x, record, report)`` for the objective at ``x``."""
    xs = x.sample.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        eps, record = denoise(xs, t, emb, w)
        total, inner, outer = _objective(record, masks, cfg)
        (grad,) = torch.autograd.grad(total, xs)
    report = _report(inner, outer)
    record = AttentionRecord(record.maps.detach(), record.t)
    return grad, eps.detach(), record, report


def rad_guidance_step(x: LatentState, t: int, emb, w, masks: MaskSet, cfg: RadConfig,
                      step_index: int, total_steps: int):
    """One guided update of the noisy sample.

    Returns ``(x_updated, report)``; outside the active window returns
    ``(x, None)`` untouched.
    """
    if not rad_active(step_index, total_steps, cfg):
        return x, None
    cfg.check_prompt_length(emb.shape[0])
    grad, _, _, report = rad_gradient(x, t, emb, w, masks, cfg)
    if not torch.isfinite(grad).all():
        raise RadGradientError(f"non-finite RAD gradient at timestep {t}")
    return rad_update(x, grad, alpha_at(step_index, total_steps, cfg)), report
