"""Video editing metrics with pluggable embedders and detectors.

Real CLIP-style encoders or object detectors can be dropped in through the
two small protocols below. The toy implementations here run offline and are
deterministic.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np
import torch

from .text import COLORS, TokenSequence, Vocabulary

__all__ = [
    "EmbedderInterface",
    "DetectorInterface",
    "PerceptualInterface",
    "RelationSpec",
    "ToyEmbedder",
    "ColorDetector",
    "toy_color_detector",
    "frame_consistency",
    "textual_alignment",
    "visor_score",
    "invariant_psnr",
    "metric_report",
    "PSNR_CAP_DB",
]

PSNR_CAP_DB = 99.0
RELATIONS = ("left", "right", "above", "below")


class EmbedderInterface(Protocol):
    def image_embed(self, frame) -> np.ndarray: ...
    def text_embed(self, prompt: TokenSequence) -> np.ndarray: ...


class DetectorInterface(Protocol):
    def detect(self, frame, obj) -> Optional[tuple]: ...


class PerceptualInterface(Protocol):
    """Slot for a learned perceptual distance such as LPIPS."""

    def distance(self, a, b) -> float: ...


def _frames_np(frames) -> np.ndarray:
    if isinstance(frames, torch.Tensor):
        frames = frames.detach().cpu().numpy()
    return np.asarray(frames, dtype=np.float64)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


class ToyEmbedder:
    """64-d image feature: 48 color-histogram bins and a 4x4 luma thumbnail.

    Text is embedded by rendering a prototype frame holding a patch of every
    color word in the prompt on a neutral canvas, then embedding that frame.
    """

    bins = 16
    thumb = 4

    def __init__(self, vocab: Optional[Vocabulary] = None):
        self.vocab = vocab or Vocabulary()

    def image_embed(self, frame) -> np.ndarray:
        f = _frames_np(frame)
        hist = [np.histogram(f[c], bins=self.bins, range=(0.0, 1.0))[0] for c in range(3)]
        hist = np.concatenate(hist).astype(np.float64) / f[0].size
        luma = 0.299 * f[0] + 0.587 * f[1] + 0.114 * f[2]
        h, w = luma.shape
        th = luma[: h - h % self.thumb, : w - w % self.thumb]
        th = th.reshape(self.thumb, th.shape[0] // self.thumb, self.thumb, -1).mean(axis=(1, 3))
        return _unit(np.concatenate([hist, th.reshape(-1) / self.thumb]))

    def text_embed(self, prompt: TokenSequence, size: int = 64) -> np.ndarray:
        words = [w for w in self.vocab.decode(prompt) if w in COLORS]
        canvas = np.full((3, size, size), 0.45)
        n = max(len(words), 1)
        for k, word in enumerate(words):
            x0 = int(size * (k + 0.25) / n)
            x1 = int(size * (k + 0.75) / n)
            canvas[:, size // 3: 2 * size // 3, x0:x1] = np.asarray(COLORS[word])[:, None, None]
        return self.image_embed(canvas)


@dataclass(frozen=True)
class RelationSpec:
    subject: object
    relation: str
    reference: object

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise ValueError(f"relation must be one of {RELATIONS}")
        if self.subject == self.reference:
            raise ValueError("subject and reference must differ")


class ColorDetector:
    """Centroid of pixels within an L-infinity tolerance of a target color.

    Object specs are RGB triples or color names from the toy palette. Several
    blobs of the target color yield the centroid of their union.
    """

    def __init__(self, tolerance: float = 0.25, min_pixels: int = 5):
        if tolerance <= 0:
            raise ValueError("tolerance must be positive")
        self.tolerance = tolerance
        self.min_pixels = min_pixels

    def _rgb(self, obj) -> np.ndarray:
        if isinstance(obj, str):
            return np.asarray(COLORS[obj], dtype=np.float64)
        return np.asarray(obj, dtype=np.float64)

    def detect(self, frame, obj) -> Optional[tuple]:
        f = _frames_np(frame)
        hit = np.abs(f - self._rgb(obj)[:, None, None]).max(axis=0) <= self.tolerance
        if hit.sum() < self.min_pixels:
            return None
        h, w = hit.shape
        rows, cols = np.nonzero(hit)
        return ((cols.mean() + 0.5) / w, (rows.mean() + 0.5) / h)


def toy_color_detector(tolerance: float = 0.25) -> ColorDetector:
    return ColorDetector(tolerance)


def frame_consistency(frames, emb: EmbedderInterface) -> float:
    f = _frames_np(frames)
    if f.shape[0] < 2:
        raise ValueError("frame consistency needs at least two frames")
    vecs = [emb.image_embed(x) for x in f]
    sims = [float(np.dot(a, b)) for a, b in itertools.combinations(vecs, 2)]
    return float(np.mean(sims))


def textual_alignment(frames, prompt: TokenSequence, emb: EmbedderInterface) -> float:
    f = _frames_np(frames)
    if f.shape[0] < 1:
        raise ValueError("no frames")
    txt = emb.text_embed(prompt)
    return float(np.mean([np.dot(emb.image_embed(x), txt) for x in f]))


def _holds(relation: str, s: tuple, r: tuple) -> bool:
    # image coordinates: y grows downward
    if relation == "left":
        return s[0] < r[0]
    if relation == "right":
        return s[0] > r[0]
    if relation == "above":
        return s[1] < r[1]
    return s[1] > r[1]


def visor_score(frames, spec: RelationSpec, det: DetectorInterface) -> float:
    """Fraction of frames where both objects are found and the relation holds.

    Frames with a missing detection count as failures.
    """
    f = _frames_np(frames)
    if f.shape[0] < 1:
        raise ValueError("no frames")
    ok = 0
    for x in f:
        s = det.detect(x, spec.subject)
        r = det.detect(x, spec.reference)
        if s is not None and r is not None and _holds(spec.relation, s, r):
            ok += 1
    return ok / f.shape[0]


def invariant_psnr(edited, source, invariant_mask) -> float:
    """PSNR in dB over invariant pixels (mask 1 = invariant), signal peak 1.0."""
    e, s = _frames_np(edited), _frames_np(source)
    if e.shape != s.shape:
        raise ValueError(f"shape mismatch {e.shape} vs {s.shape}")
    m = _frames_np(invariant_mask).astype(bool)
    if e.ndim == 4 and m.ndim == 3:
        m = np.broadcast_to(m[:, None], e.shape)
    m = np.broadcast_to(m, e.shape)
    if not m.any():
        raise ValueError("invariant mask is empty")
    mse = float(np.mean((e[m] - s[m]) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def metric_report(frames, prompt: Optional[TokenSequence] = None, source=None,
                  invariant_mask=None, relation: Optional[RelationSpec] = None,
                  emb: Optional[EmbedderInterface] = None,
                  det: Optional[DetectorInterface] = None) -> dict:
    """Compute whichever metrics the inputs allow; keys follow the report schema."""
    emb = emb or ToyEmbedder()
    out = {}
    if _frames_np(frames).shape[0] >= 2:
        out["frame_consistency"] = frame_consistency(frames, emb)
    if prompt is not None:
        out["textual_alignment"] = textual_alignment(frames, prompt, emb)
    if relation is not None:
        out["visor"] = visor_score(frames, relation, det or toy_color_detector())
    if source is not None and invariant_mask is not None:
        out["invariant_psnr_db"] = invariant_psnr(frames, source, invariant_mask)
    return out
