"""Inversion and the guided editing loop.

The source is inverted to noise with deterministic DDIM under the source
prompt. The edit then denoises under the edited prompt. At each timestep the
loop (1) optionally refocuses attention with one gradient step on the noisy
sample, (2) predicts noise on the updated sample, (3) takes the sampler
step, and (4) optionally re-injects the diffused source outside the edited
objects. Long videos can be processed in overlapping frame windows whose
predictions are averaged per frame.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .denoiser import denoise, to_model_space, from_model_space, ToyVideoDenoiser
from .irjs import IrjsConfig, blend, source_noise
from .rad import RadConfig, RadLossReport, rad_active, rad_gradient, rad_update, alpha_at
from .regions import BoxTrack, MaskSet, rasterize_tracks, union_mask
from .scheduler import (LatentState, NoiseSchedule, ddim_invert_step, ddim_step,
                        diffuse_forward, strided_timesteps)
from .text import TokenSequence, embed_tokens

log = logging.getLogger(__name__)

__all__ = [
    "EditConfig",
    "EditResult",
    "NumericFailure",
    "invert_video",
    "sample_video",
    "edit_video",
    "sliding_window_edit",
    "window_starts",
    "coverage_counts",
]


class NumericFailure(FloatingPointError):
    pass


@dataclass
class EditConfig:
    source_prompt: TokenSequence
    edited_prompt: TokenSequence
    objects: Sequence[BoxTrack] = ()
    rad: Optional[RadConfig] = None
    irjs: IrjsConfig = IrjsConfig(enabled=False)
    steps: int = 50
    eta: float = 0.0
    seed: int = 0
    record_attention: bool = False

    def __post_init__(self):
        self.objects = tuple(self.objects)
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        L = len(self.edited_prompt)
        for tr in self.objects:
            if tr.word_index >= L:
                raise ValueError(f"object {tr.object_id!r}: word index {tr.word_index} outside "
                                 f"edited prompt of length {L}")
        if self.rad is not None:
            self.rad.check_prompt_length(L)
            known = {tr.word_index for tr in self.objects}
            missing = set(self.rad.word_indices) - known
            if missing:
                raise ValueError(f"no object track for word indices {sorted(missing)}")
        if self.irjs.mode == "stochastic" and self.irjs.enabled and self.eta <= 0:
            raise ValueError("stochastic IRJS needs eta > 0")

    def to_dict(self) -> dict:
        rad = None
        if self.rad is not None:
            rad = {"word_indices": list(self.rad.word_indices), "fraction": self.rad.fraction,
                   "alpha_start": self.rad.alpha_start, "alpha_end": self.rad.alpha_end,
                   "apply_fraction": self.rad.apply_fraction, "reuse_eps": self.rad.reuse_eps}
        return {"source_prompt": list(self.source_prompt.ids),
                "edited_prompt": list(self.edited_prompt.ids),
                "objects": [tr.to_dict() for tr in self.objects], "rad": rad,
                "irjs": {"enabled": self.irjs.enabled, "mode": self.irjs.mode,
                         "blend_final_step": self.irjs.blend_final_step},
                "steps": self.steps, "eta": self.eta, "seed": self.seed}


@dataclass
class EditResult:
    video: torch.Tensor
    losses: list = field(default_factory=list)
    attention: Optional[list] = None
    timesteps: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def report(self, config: Optional[EditConfig] = None) -> dict:
        out = {"timesteps": self.timesteps, "losses": self.losses, "metrics": self.metrics}
        if config is not None:
            out["config"] = config.to_dict()
        return out


def _embed(w, seq: TokenSequence) -> torch.Tensor:
    if isinstance(w, ToyVideoDenoiser):
        return w.embed(seq)
    return embed_tokens(seq, 8)


def _check_finite(x: torch.Tensor, t: int, what: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericFailure(f"non-finite {what} at timestep {t}")


def _pairs(schedule: NoiseSchedule, steps: int) -> list:
    ts = strided_timesteps(schedule.T, steps)
    return list(zip(ts[:-1], ts[1:]))


@torch.no_grad()
def invert_video(v: torch.Tensor, source_prompt: TokenSequence, w, schedule: NoiseSchedule,
                 steps: int) -> LatentState:
    """Deterministic DDIM inversion of a ``[0, 1]`` video up to ``t = T``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    emb = _embed(w, source_prompt)
    x = LatentState(to_model_space(v), 0)
    for t, t_prev in reversed(_pairs(schedule, steps)):
        # noise is predicted at the destination timestep, matching the sampler's query
        eps, _ = denoise(x, t, emb, w)
        x = ddim_invert_step(x, eps, t_prev, t, schedule)
        _check_finite(x.sample, t, "inverted state")
    return x


@torch.no_grad()
def sample_video(x_T: LatentState, prompt: TokenSequence, w, schedule: NoiseSchedule,
                 steps: int, eta: float = 0.0, seed: int = 0) -> torch.Tensor:
    """Plain DDIM sampling from ``x_T``; returns a clamped ``[0, 1]`` video."""
    emb = _embed(w, prompt)
    x = x_T
    for t, t_prev in _pairs(schedule, steps):
        eps, _ = denoise(x, t, emb, w)
        x = ddim_step(x, eps, t, t_prev, eta, schedule, seed)
    return from_model_space(x.sample).clamp(0.0, 1.0)


def window_starts(num_frames: int, window: int, stride: int) -> list:
    if not 1 <= stride <= window <= num_frames:
        raise ValueError(f"need 1 <= stride ({stride}) <= window ({window}) <= frames ({num_frames})")
    starts = list(range(0, num_frames - window + 1, stride))
    if starts[-1] + window < num_frames:
        starts.append(num_frames - window)
    return starts


def coverage_counts(num_frames: int, window: int, stride: int) -> list:
    counts = [0] * num_frames
    for s in window_starts(num_frames, window, stride):
        for f in range(s, s + window):
            counts[f] += 1
    return counts


def _merge_reports(reports: list, weights: list) -> Optional[RadLossReport]:
    reports = [(r, wt) for r, wt in zip(reports, weights) if r is not None]
    if not reports:
        return None
    if len(reports) == 1:
        return reports[0][0]
    tot = sum(wt for _, wt in reports)
    inner = {j: sum(r.inner[j] * wt for r, wt in reports) / tot for j in reports[0][0].inner}
    outer = {j: sum(r.outer[j] * wt for r, wt in reports) / tot for j in reports[0][0].outer}
    return RadLossReport(inner, outer)


def _window_pass(x: LatentState, t: int, emb, w, masks: Optional[MaskSet],
                 cfg: EditConfig, step_index: int, total: int):
    """Guidance (when active) and noise prediction for one frame window."""
    report = None
    if rad_active(step_index, total, cfg.rad):
        grad, eps, record, report = rad_gradient(x, t, emb, w, masks, cfg.rad)
        _check_finite(grad, t, "RAD gradient")
        x = rad_update(x, grad, alpha_at(step_index, total, cfg.rad))
        if not cfg.rad.reuse_eps:
            with torch.no_grad():
                eps, record = denoise(x, t, emb, w)
    else:
        with torch.no_grad():
            eps, record = denoise(x, t, emb, w)
    return x, eps, record, report


def _edit_loop(v: torch.Tensor, cfg: EditConfig, w, schedule: NoiseSchedule,
               x_T: Optional[LatentState], windows: list) -> EditResult:
    F_, _, H, W = v.shape
    for tr in cfg.objects:
        if tr.num_frames != F_:
            raise ValueError(f"track {tr.object_id!r} has {tr.num_frames} frames, video has {F_}")
    if x_T is None:
        x_T = invert_video(v, cfg.source_prompt, w, schedule, cfg.steps)
    if x_T.t != schedule.T or tuple(x_T.sample.shape) != tuple(v.shape):
        raise ValueError("initial state must be a full-size sample at t = T")
    emb = _embed(w, cfg.edited_prompt)

    probe_masks = None
    if cfg.rad is not None:
        pf = w.config.probe_factor if isinstance(w, ToyVideoDenoiser) else 1
        probe_masks = rasterize_tracks(cfg.objects, H // pf, W // pf, F_)
    union = None
    if cfg.irjs.enabled:
        union = union_mask(rasterize_tracks(cfg.objects, H, W, F_), num_frames=F_)
        v_model = to_model_space(v.to(x_T.sample.dtype))

    counts = torch.zeros(F_, dtype=x_T.sample.dtype)
    for s, e in windows:
        counts[s:e] += 1
    counts = counts[:, None, None, None]

    pairs = _pairs(schedule, cfg.steps)
    total = len(pairs)
    x = x_T
    losses, attention = [], [] if cfg.record_attention else None
    for i, (t, t_prev) in enumerate(pairs):
        x_acc = torch.zeros_like(x.sample)
        eps_acc = torch.zeros_like(x.sample)
        att_acc = None
        reports, weights = [], []
        for s, e in windows:
            xw = LatentState(x.sample[s:e], t)
            mw = probe_masks.frames(s, e) if probe_masks is not None else None
            xw, eps_w, rec, rep = _window_pass(xw, t, emb, w, mw, cfg, i, total)
            x_acc[s:e] += xw.sample
            eps_acc[s:e] += eps_w
            reports.append(rep)
            weights.append(e - s)
            if attention is not None:
                maps = rec.maps.detach()
                if att_acc is None:
                    att_acc = torch.zeros((F_, *maps.shape[1:]), dtype=maps.dtype)
                att_acc[s:e] += maps
        x = LatentState(x_acc / counts, t)
        eps = eps_acc / counts
        _check_finite(eps, t, "noise prediction")
        x = ddim_step(x, eps, t, t_prev, cfg.eta, schedule, cfg.seed)
        if cfg.irjs.enabled and (t_prev > 0 or cfg.irjs.blend_final_step):
            noise = source_noise(v.shape, t_prev, cfg.irjs, cfg.seed, dtype=x.sample.dtype)
            x = blend(x, diffuse_forward(v_model, t_prev, noise, schedule), union)
        _check_finite(x.sample, t_prev, "sample")
        report = _merge_reports(reports, weights)
        losses.append({"step": i, "t": t, "t_prev": t_prev,
                       "rad": report.to_dict() if report is not None else None})
        if attention is not None:
            attention.append((att_acc / counts[:, :, :, :1]).numpy())
    video = from_model_space(x.sample).clamp(0.0, 1.0)
    timesteps = [pairs[0][0]] + [p[1] for p in pairs]
    return EditResult(video.detach(), losses, attention, timesteps)


def edit_video(v: torch.Tensor, cfg: EditConfig, w, schedule: NoiseSchedule,
               x_T: Optional[LatentState] = None) -> EditResult:
    """Edit a ``(F, C, H, W)`` video in ``[0, 1]``.

    ``x_T`` may carry a precomputed inversion of ``v`` under the source prompt.
    """
    return _edit_loop(v, cfg, w, schedule, x_T, [(0, v.shape[0])])


def sliding_window_edit(v: torch.Tensor, cfg: EditConfig, w, schedule: NoiseSchedule,
                        window: int, stride: int, x_T: Optional[LatentState] = None) -> EditResult:
    """Edit in overlapping frame windows; overlapping predictions are averaged per frame."""
    starts = window_starts(v.shape[0], window, stride)
    return _edit_loop(v, cfg, w, schedule, x_T, [(s, s + window) for s in starts])
