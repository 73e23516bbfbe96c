"""Desk-scale experiments: the reference toy model, round-trip error, and
the two ablation trends (attention guidance on/off, source re-injection
on/off) on a two-object recoloring task.

The recoloring task starts from a video with two shapes, one per half of the
frame, and asks for two new colors with the first-named color on the left.
Boxes around the source shapes tell the guidance where each color belongs.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import ShapeVideo, make_dataset, make_shape_video
from .denoiser import ToyVideoDenoiser, load_checkpoint, save_checkpoint, train_toy_denoiser
from .irjs import IrjsConfig
from .metrics import RelationSpec, invariant_psnr, toy_color_detector, visor_score
from .pipeline import EditConfig, EditResult, edit_video, invert_video, sample_video
from .rad import RadConfig
from .regions import BoxTrack, rasterize_tracks, union_mask
from .scheduler import NoiseSchedule, default_schedule
from .text import COLORS, Vocabulary

log = logging.getLogger(__name__)

__all__ = [
    "ReferenceSetup",
    "reference_model",
    "round_trip_error",
    "RecolorTask",
    "recolor_task",
    "run_rad_trend",
    "run_irjs_trend",
]


@dataclass(frozen=True)
class ReferenceSetup:
    """Everything that determines the reference toy model's weights."""

    num_videos: int = 128
    frames: int = 8
    size: int = 64
    data_seed: int = 0
    epochs: int = 60
    seed: int = 0
    weighting: str = "snr"
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.05

    def key(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def reference_model(cache_dir=None, setup: ReferenceSetup = ReferenceSetup()) -> ToyVideoDenoiser:
    """Train (or load from ``cache_dir``) the toy model used by the experiments.

    Training is deterministic on one thread, so a cached checkpoint is
    interchangeable with a fresh run. Takes roughly 8 minutes on one CPU core.
    """
    path = Path(cache_dir) / f"reference-{setup.key()}" if cache_dir is not None else None
    if path is not None and (path / "manifest.json").exists():
        return load_checkpoint(path)
    from .scheduler import make_linear_schedule
    schedule = make_linear_schedule(setup.T, setup.beta_start, setup.beta_end)
    dataset, _ = make_dataset(setup.num_videos, setup.frames, setup.size, setup.data_seed)
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        model = train_toy_denoiser(dataset, schedule, setup.epochs, setup.seed,
                                   weighting=setup.weighting)
    finally:
        torch.set_num_threads(threads)
    if path is not None:
        save_checkpoint(model, path)
        (path / "training.json").write_text(json.dumps({"loss_history": model.loss_history,
                                                        "setup": asdict(setup)}))
    return model


@torch.no_grad()
def round_trip_error(model, videos: Sequence, schedule: NoiseSchedule, steps: int) -> float:
    """Mean relative L2 error of invert-then-resample under the source caption."""
    errs = []
    for video, prompt in videos:
        x_T = invert_video(video, prompt, model, schedule, steps)
        rec = sample_video(x_T, prompt, model, schedule, steps, eta=0.0, seed=0)
        errs.append(float(torch.linalg.vector_norm(rec - video) / torch.linalg.vector_norm(video)))
    return float(np.mean(errs))


@dataclass
class RecolorTask:
    source: ShapeVideo
    source_words: list
    edited_words: list
    tracks: list
    relation: RelationSpec

    @property
    def video(self) -> torch.Tensor:
        return self.source.video


def recolor_task(seed: int, frames: int = 8, size: int = 64,
                 source_colors: Optional[tuple] = ("red", "green"),
                 target_colors: Optional[tuple] = ("blue", "yellow")) -> RecolorTask:
    """Two shapes get two new colors; the first target color goes on the left.

    Passing ``None`` for either color pair draws it at random from the palette
    (targets always differ from the source colors).
    """
    rng = np.random.default_rng(10_000 + seed)
    palette = list(COLORS)
    if source_colors is None:
        source_colors = tuple(str(c) for c in rng.choice(palette, size=2, replace=False))
    sv = make_shape_video(rng, frames, size, colors=list(source_colors), position_words=False)
    if target_colors is None:
        rest = [c for c in palette if c not in source_colors]
        target_colors = tuple(str(c) for c in rng.choice(rest, size=2, replace=False))
    new_left, new_right = target_colors
    left = min(sv.objects, key=lambda o: float(o.centers[:, 0].mean()))
    right = next(o for o in sv.objects if o is not left)
    edited = ["a", new_left, left.shape, "and", "a", new_right, right.shape]
    tracks = [BoxTrack("left", 1, tuple(map(tuple, left.boxes()))),
              BoxTrack("right", 5, tuple(map(tuple, right.boxes())))]
    return RecolorTask(sv, list(sv.caption), edited, tracks, RelationSpec(new_left, "left", new_right))


def _config(task: RecolorTask, vocab: Vocabulary, rad: Optional[RadConfig], irjs: IrjsConfig,
            seed: int, steps: int) -> EditConfig:
    return EditConfig(vocab.encode(task.source_words), vocab.encode(task.edited_words),
                      task.tracks, rad, irjs, steps, 0.0, seed)


@dataclass
class TrendResult:
    on: list = field(default_factory=list)
    off: list = field(default_factory=list)

    @property
    def mean_on(self) -> float:
        return float(np.mean(self.on))

    @property
    def mean_off(self) -> float:
        return float(np.mean(self.off))

    def to_dict(self) -> dict:
        return {"on": self.on, "off": self.off, "mean_on": self.mean_on, "mean_off": self.mean_off}


def run_rad_trend(model, seeds: Sequence[int], schedule: Optional[NoiseSchedule] = None,
                  alpha_start: float = 20.0, alpha_end: float = 10.0, steps: int = 50,
                  tolerance: float = 0.3, vocab: Optional[Vocabulary] = None,
                  **task_kwargs) -> TrendResult:
    """VISOR with and without attention guidance; source re-injection on in both arms."""
    schedule = schedule or default_schedule()
    vocab = vocab or Vocabulary()
    det = toy_color_detector(tolerance)
    out = TrendResult()
    rad = RadConfig((1, 5), alpha_start=alpha_start, alpha_end=alpha_end)
    for seed in seeds:
        task = recolor_task(seed, **task_kwargs)
        with torch.no_grad():
            x_T = invert_video(task.video, vocab.encode(task.source_words), model, schedule, steps)
        for arm, cfg_rad in ((out.on, rad), (out.off, None)):
            cfg = _config(task, vocab, cfg_rad, IrjsConfig(True), seed, steps)
            res = edit_video(task.video, cfg, model, schedule, x_T=x_T)
            arm.append(visor_score(res.video, task.relation, det))
        log.info("seed %d visor on %.3f off %.3f", seed, out.on[-1], out.off[-1])
    return out


def run_irjs_trend(model, seeds: Sequence[int], schedule: Optional[NoiseSchedule] = None,
                   alpha_start: float = 20.0, alpha_end: float = 10.0, steps: int = 50,
                   vocab: Optional[Vocabulary] = None, **task_kwargs) -> tuple:
    """Invariant-region PSNR with and without source re-injection (guidance on in both).

    Returns ``(TrendResult, max_abs_invariant_error_with_reinjection)``.
    """
    schedule = schedule or default_schedule()
    vocab = vocab or Vocabulary()
    out = TrendResult()
    worst = 0.0
    rad = RadConfig((1, 5), alpha_start=alpha_start, alpha_end=alpha_end)
    for seed in seeds:
        task = recolor_task(seed, **task_kwargs)
        F_, _, H, W = task.video.shape
        invariant = 1 - union_mask(rasterize_tracks(task.tracks, H, W, F_))
        with torch.no_grad():
            x_T = invert_video(task.video, vocab.encode(task.source_words), model, schedule, steps)
        for arm, irjs in ((out.on, IrjsConfig(True, "deterministic", True)),
                          (out.off, IrjsConfig(False))):
            res = edit_video(task.video, _config(task, vocab, rad, irjs, seed, steps), model,
                             schedule, x_T=x_T)
            arm.append(invariant_psnr(res.video, task.video, invariant))
            if irjs.enabled:
                keep = torch.from_numpy(invariant.astype(bool))[:, None].expand_as(res.video)
                worst = max(worst, float((res.video - task.video)[keep].abs().max()))
        log.info("seed %d psnr on %.2f off %.2f", seed, out.on[-1], out.off[-1])
    return out, worst
