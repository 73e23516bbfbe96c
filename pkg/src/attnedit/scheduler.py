"""Noise schedules, forward diffusion and DDIM / DDPM stepping.

Timesteps are integer indices into ``alphas_bar`` which has ``T + 1``
entries; index 0 is clean data (``alphas_bar[0] == 1``) and index ``T`` is
the noisiest state. ``betas[t - 1]`` holds beta_t for ``t = 1..T``.

All stepping functions accept torch tensors (or anything supporting the same
arithmetic) and are pure given their arguments.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch

from .seeding import gaussian

__all__ = [
    "NoiseSchedule",
    "LatentState",
    "PosteriorParams",
    "make_linear_schedule",
    "default_schedule",
    "strided_timesteps",
    "diffuse_forward",
    "ddim_sigma",
    "ddim_step",
    "ddim_invert_step",
    "ddpm_posterior",
]


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    num_steps: int
    betas: np.ndarray
    alphas_bar: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.shape != (self.num_steps,):
            raise ScheduleError(f"expected {self.num_steps} betas, got shape {betas.shape}")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ScheduleError("betas must lie in (0, 1)")
        abar = np.asarray(self.alphas_bar, dtype=np.float64)
        if abar.shape != (self.num_steps + 1,) or abar[0] != 1.0:
            raise ScheduleError("alphas_bar must have T+1 entries starting at 1")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas_bar", abar)

    @property
    def T(self) -> int:
        return self.num_steps

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.num_steps:
            raise ScheduleError(f"beta_t defined for t in [1, {self.num_steps}], got {t}")
        return float(self.betas[t - 1])

    def abar(self, t: int) -> float:
        if not 0 <= t <= self.num_steps:
            raise ScheduleError(f"timestep {t} outside [0, {self.num_steps}]")
        return float(self.alphas_bar[t])

    def reaches_noise(self, threshold: float = 0.01) -> bool:
        """True when the terminal state carries less than ``threshold`` signal power."""
        return bool(self.alphas_bar[-1] < threshold)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ScheduleError("betas must be a non-empty 1-d sequence")
        abar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(int(betas.size), betas, abar)

    def to_json(self) -> str:
        return json.dumps({"T": self.num_steps, "betas": [float(b) for b in self.betas]})

    @classmethod
    def from_json(cls, text: str) -> "NoiseSchedule":
        doc = json.loads(text)
        sched = cls.from_betas(doc["betas"])
        if sched.num_steps != int(doc["T"]):
            raise ScheduleError(f"T={doc['T']} does not match {sched.num_steps} betas")
        return sched

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "NoiseSchedule":
        return cls.from_json(Path(path).read_text())


@dataclass
class LatentState:
    """A noisy sample tagged with the timestep it lives at."""

    sample: torch.Tensor
    t: int

    @property
    def shape(self):
        return self.sample.shape


@dataclass
class PosteriorParams:
    mean: torch.Tensor
    std: float


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, int(T), dtype=np.float64))


def default_schedule() -> NoiseSchedule:
    """Training schedule of the toy model: 200 linear steps ending below 1% signal."""
    return make_linear_schedule(200, 1e-4, 0.05)


def strided_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced descending timesteps ``[T, ..., 0]`` with ``steps`` intervals."""
    if steps < 1 or steps > T:
        raise ScheduleError(f"steps must be in [1, {T}], got {steps}")
    ts = np.round(np.linspace(T, 0, steps + 1)).astype(int)
    return [int(t) for t in ts]


def _check_shape(a, b, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def diffuse_forward(v0, t: int, eps, schedule: NoiseSchedule) -> LatentState:
    """Sample ``q(x_t | x_0)`` with explicit noise: sqrt(abar)·v0 + sqrt(1-abar)·eps."""
    _check_shape(v0, eps, "diffuse_forward")
    a = schedule.abar(t)
    return LatentState(math.sqrt(a) * v0 + math.sqrt(1.0 - a) * eps, t)


def ddim_sigma(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    a_t, a_p = schedule.abar(t), schedule.abar(t_prev)
    var = (1.0 - a_p) / (1.0 - a_t) * (1.0 - a_t / a_p)
    return eta * math.sqrt(max(var, 0.0))


def _predict_x0(x, eps, a_t: float):
    return (x - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)


def ddim_step(x_t: LatentState, eps_pred, t: int, t_prev: int, eta: float,
              schedule: NoiseSchedule, rng_seed: Optional[int] = None) -> LatentState:
    """One reverse DDIM update from ``t`` to ``t_prev``.

    ``eta = 0`` is the deterministic sampler; ``eta = 1`` reproduces the DDPM
    ancestral step. Fresh noise is keyed on ``(rng_seed, t_prev)``.
    """
    if t_prev >= t:
        raise ScheduleError(f"t_prev ({t_prev}) must be below t ({t})")
    if not 0.0 <= eta <= 1.0:
        raise ScheduleError(f"eta must be in [0, 1], got {eta}")
    a_t, a_p = schedule.abar(t), schedule.abar(t_prev)
    if a_t <= 0.0:
        raise ScheduleError("alphas_bar[t] is zero; x0 cannot be recovered")
    _check_shape(x_t.sample, eps_pred, "ddim_step")
    x0 = _predict_x0(x_t.sample, eps_pred, a_t)
    sigma = ddim_sigma(schedule, t, t_prev, eta)
    out = math.sqrt(a_p) * x0 + math.sqrt(max(1.0 - a_p - sigma ** 2, 0.0)) * eps_pred
    if sigma > 0.0:
        if rng_seed is None:
            raise ScheduleError("stochastic DDIM step needs rng_seed")
        z = gaussian(eps_pred.shape, rng_seed, t_prev, "ddim", dtype=eps_pred.dtype)
        out = out + sigma * z
    return LatentState(out, t_prev)


def ddim_invert_step(x_prev: LatentState, eps_pred, t_prev: int, t: int,
                     schedule: NoiseSchedule) -> LatentState:
    """Run the deterministic DDIM update backwards, from ``t_prev`` up to ``t``."""
    if t <= t_prev:
        raise ScheduleError(f"t ({t}) must exceed t_prev ({t_prev})")
    a_t, a_p = schedule.abar(t), schedule.abar(t_prev)
    if a_t <= 0.0:
        raise ScheduleError("alphas_bar[t] is zero")
    _check_shape(x_prev.sample, eps_pred, "ddim_invert_step")
    x0 = _predict_x0(x_prev.sample, eps_pred, a_p)
    return LatentState(math.sqrt(a_t) * x0 + math.sqrt(1.0 - a_t) * eps_pred, t)


def ddpm_posterior(x_t: LatentState, eps_pred, t: int, schedule: NoiseSchedule,
                   t_prev: Optional[int] = None) -> PosteriorParams:
    """Gaussian transition ``q(x_{t_prev} | x_t, x0_hat)`` with x0_hat from ``eps_pred``.

    ``t_prev`` defaults to ``t - 1`` (plain DDPM); strided samplers pass the
    previous grid point and get the same closed form with the cumulative ratio.
    """
    if t < 1 or t > schedule.T:
        raise ScheduleError(f"posterior defined for t in [1, {schedule.T}], got {t}")
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t:
        raise ScheduleError(f"t_prev must be in [0, {t}), got {t_prev}")
    a_t, a_p = schedule.abar(t), schedule.abar(t_prev)
    beta = schedule.beta(t) if t_prev == t - 1 else 1.0 - a_t / a_p
    x0 = _predict_x0(x_t.sample, eps_pred, a_t)
    c0 = math.sqrt(a_p) * beta / (1.0 - a_t)
    ct = math.sqrt(a_t / a_p) * (1.0 - a_p) / (1.0 - a_t)
    var = beta * (1.0 - a_p) / (1.0 - a_t)
    return PosteriorParams(c0 * x0 + ct * x_t.sample, math.sqrt(max(var, 0.0)))
