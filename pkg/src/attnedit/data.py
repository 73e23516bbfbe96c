"""Synthetic two-shape videos with captions.

Each video has a static textured background and two solid shapes of
different colors moving linearly. One shape starts in the left half and one
in the right half. Captions name color and kind of both shapes, in random
order, and half of them also name the coarse horizontal position.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .text import COLORS, SHAPES, Vocabulary, TokenSequence

__all__ = ["ShapeObject", "ShapeVideo", "make_shape_video", "make_dataset", "render_shape"]


@dataclass
class ShapeObject:
    color: str
    shape: str
    centers: np.ndarray       # (F, 2) normalized (x, y)
    radius: float             # normalized half-size

    @property
    def position(self) -> str:
        return "left" if float(self.centers[:, 0].mean()) < 0.5 else "right"

    def boxes(self, margin: float = 0.02) -> list:
        out = []
        for cx, cy in self.centers:
            r = self.radius + margin
            out.append([max(0.0, cx - r), max(0.0, cy - r), min(1.0, cx + r), min(1.0, cy + r)])
        return out

    def to_dict(self) -> dict:
        return {"color": self.color, "shape": self.shape, "position": self.position,
                "radius": self.radius, "centers": self.centers.tolist(), "boxes": self.boxes()}


@dataclass
class ShapeVideo:
    video: torch.Tensor       # (F, 3, H, W) in [0, 1]
    caption: list
    objects: list = field(default_factory=list)
    background: np.ndarray | None = None


def render_shape(canvas: np.ndarray, shape: str, cx: float, cy: float, r: float,
                 rgb) -> np.ndarray:
    """Paint a solid shape onto ``canvas`` (3, H, W) in place; returns its pixel mask."""
    _, h, w = canvas.shape
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    dx = xs[None, :] - cx
    dy = ys[:, None] - cy
    if shape == "circle":
        m = dx ** 2 + dy ** 2 < r ** 2
    elif shape == "square":
        m = (np.abs(dx) < r) & (np.abs(dy) < r)
    elif shape == "triangle":
        # apex up; base on y = cy + r
        m = (dy < r) & (dy > -r) & (np.abs(dx) < (dy + r) / 2)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    canvas[:, m] = np.asarray(rgb, dtype=canvas.dtype)[:, None]
    return m


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.3, 0.55) + rng.uniform(-0.05, 0.05, size=3)
    coarse = rng.normal(0.0, 1.0, size=(3, 4, 4))
    # bilinear upsample of a 4x4 field gives a smooth texture
    t = torch.nn.functional.interpolate(torch.from_numpy(coarse)[None], size=(size, size),
                                        mode="bilinear", align_corners=False)[0].numpy()
    return np.clip(base[:, None, None] + 0.06 * t, 0.0, 1.0)


def make_shape_video(rng: np.random.Generator, frames: int = 8, size: int = 64,
                     colors=None, shapes=None, position_words: bool | None = None) -> ShapeVideo:
    palette = list(COLORS)
    colors = colors or list(rng.choice(palette, size=2, replace=False))
    shapes = shapes or list(rng.choice(SHAPES, size=2))
    bg = _background(rng, size)
    objs = []
    left_first = bool(rng.random() < 0.5)
    for k in range(2):
        side = k if left_first else 1 - k
        r = rng.uniform(0.1, 0.14)
        x = rng.uniform(0.18, 0.36) + 0.46 * side
        y = rng.uniform(0.25, 0.75)
        v = rng.uniform(-0.015, 0.015, size=2)
        c = np.array([x, y]) + np.arange(frames)[:, None] * v[None]
        c = np.clip(c, r + 0.02, 1 - r - 0.02)
        objs.append(ShapeObject(str(colors[k]), str(shapes[k]), c, float(r)))
    video = np.empty((frames, 3, size, size), dtype=np.float64)
    for f in range(frames):
        canvas = bg.copy()
        for o in objs:
            render_shape(canvas, o.shape, o.centers[f, 0], o.centers[f, 1], o.radius,
                         COLORS[o.color])
        video[f] = canvas
    if position_words is None:
        position_words = bool(rng.random() < 0.5)
    order = rng.permutation(2)
    caption = []
    for n, k in enumerate(order):
        o = objs[k]
        if n:
            caption.append("and")
        caption += ["a", o.color, o.shape]
        if position_words:
            caption.append(o.position)
    return ShapeVideo(torch.from_numpy(video.astype(np.float32)), caption, objs, bg)


def make_dataset(num_videos: int, frames: int = 8, size: int = 64, seed: int = 0,
                 vocab: Vocabulary | None = None):
    """Return ``(dataset, videos)``; ``dataset`` is ``[(video, TokenSequence), ...]``."""
    if size < 32:
        raise ValueError("size must be at least 32")
    vocab = vocab or Vocabulary()
    rng = np.random.default_rng(seed)
    videos = [make_shape_video(rng, frames, size) for _ in range(num_videos)]
    return [(sv.video, vocab.encode(sv.caption)) for sv in videos], videos
