"""Bounding-box tracks and their binary masks.

Boxes are normalized ``(x0, y0, x1, y1)`` with open interiors: a grid cell is
inside iff its center lies strictly within the box.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "BoxTrack",
    "MaskSet",
    "DegenerateRegionError",
    "rasterize",
    "rasterize_tracks",
    "union_mask",
    "k_for_mask",
    "complement",
]


class DegenerateRegionError(ValueError):
    """A box or mask encloses no grid cell."""


@dataclass(frozen=True)
class BoxTrack:
    object_id: str
    word_index: int
    boxes: tuple

    def __post_init__(self):
        boxes = tuple(tuple(float(v) for v in b) for b in self.boxes)
        if not boxes:
            raise ValueError(f"track {self.object_id!r} has no frames")
        for i, b in enumerate(boxes):
            if len(b) != 4:
                raise ValueError(f"track {self.object_id!r} frame {i}: expected 4 coordinates")
            x0, y0, x1, y1 = b
            if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
                raise ValueError(f"track {self.object_id!r} frame {i}: invalid box {b}")
        if self.word_index < 0:
            raise ValueError("word_index must be non-negative")
        object.__setattr__(self, "boxes", boxes)

    @property
    def num_frames(self) -> int:
        return len(self.boxes)

    def to_dict(self) -> dict:
        return {"object_id": self.object_id, "word_index": self.word_index,
                "boxes": [list(b) for b in self.boxes]}

    @classmethod
    def from_dict(cls, d: dict) -> "BoxTrack":
        return cls(str(d["object_id"]), int(d["word_index"]), tuple(map(tuple, d["boxes"])))


@dataclass
class MaskSet:
    """Per-object ``(F, H, W)`` binary masks sharing one resolution."""

    resolution: tuple
    masks: dict = field(default_factory=dict)
    word_indices: dict = field(default_factory=dict)

    def __post_init__(self):
        self.resolution = tuple(int(r) for r in self.resolution)
        frames = None
        for oid, m in self.masks.items():
            m = np.asarray(m)
            if m.ndim != 3 or m.shape[1:] != self.resolution:
                raise ValueError(f"mask {oid!r} has shape {m.shape}, expected (F, {self.resolution})")
            if not np.isin(m, (0, 1)).all():
                raise ValueError(f"mask {oid!r} is not binary")
            if frames is None:
                frames = m.shape[0]
            elif m.shape[0] != frames:
                raise ValueError("all objects must have the same frame count")
            self.masks[oid] = m.astype(np.uint8)

    @property
    def num_frames(self) -> int:
        return next(iter(self.masks.values())).shape[0] if self.masks else 0

    def for_word(self, j: int) -> np.ndarray:
        hits = [oid for oid, w in self.word_indices.items() if w == j]
        if not hits:
            raise KeyError(f"no mask object for word index {j}")
        if len(hits) > 1:
            return np.maximum.reduce([self.masks[o] for o in hits])
        return self.masks[hits[0]]

    def frames(self, start: int, stop: int) -> "MaskSet":
        return MaskSet(self.resolution, {k: v[start:stop] for k, v in self.masks.items()},
                       dict(self.word_indices))


def _cell_centers(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def _rasterize_box(box, height: int, width: int) -> np.ndarray:
    x0, y0, x1, y1 = box
    cy, cx = _cell_centers(height), _cell_centers(width)
    rows = (cy > y0) & (cy < y1)
    cols = (cx > x0) & (cx < x1)
    return (rows[:, None] & cols[None, :]).astype(np.uint8)


def rasterize(track: BoxTrack, height: int, width: int) -> MaskSet:
    if height < 1 or width < 1:
        raise ValueError("resolution must be at least 1x1")
    frames = []
    for i, box in enumerate(track.boxes):
        m = _rasterize_box(box, height, width)
        if not m.any():
            raise DegenerateRegionError(
                f"object {track.object_id!r} frame {i}: box {box} covers no cell center "
                f"at {height}x{width}; enlarge the box or raise the resolution")
        frames.append(m)
    return MaskSet((height, width), {track.object_id: np.stack(frames)},
                   {track.object_id: track.word_index})


def rasterize_tracks(tracks: Sequence[BoxTrack], height: int, width: int,
                     num_frames: int | None = None) -> MaskSet:
    """Rasterize several tracks into one set; an empty list yields an empty set."""
    out = MaskSet((height, width))
    for tr in tracks:
        if num_frames is not None and tr.num_frames != num_frames:
            raise ValueError(f"track {tr.object_id!r} has {tr.num_frames} frames, expected {num_frames}")
        if tr.object_id in out.masks:
            raise ValueError(f"duplicate object id {tr.object_id!r}")
        one = rasterize(tr, height, width)
        out.masks.update(one.masks)
        out.word_indices.update(one.word_indices)
    out.__post_init__()
    return out


def union_mask(sets: MaskSet, num_frames: int | None = None) -> np.ndarray:
    """Elementwise OR over objects, per frame.

    An empty set is only accepted when ``num_frames`` is given, in which case
    the union is all zeros (everything invariant).
    """
    if not sets.masks:
        if num_frames is None:
            raise ValueError("empty MaskSet; pass num_frames for an all-zero union")
        return np.zeros((num_frames, *sets.resolution), dtype=np.uint8)
    stack = list(sets.masks.values())
    shapes = {m.shape for m in stack}
    if len(shapes) != 1:
        raise ValueError(f"resolution mismatch among masks: {shapes}")
    return np.maximum.reduce(stack)


def k_for_mask(mask, fraction: float) -> int:
    """Top-k budget: ``max(1, round_half_up(fraction * count))``."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    count = int(np.count_nonzero(mask))
    if count == 0:
        raise DegenerateRegionError("empty mask has no top-k budget")
    return max(1, int(np.floor(fraction * count + 0.5)))


def complement(mask) -> np.ndarray:
    m = np.asarray(mask)
    return (1 - m).astype(m.dtype)
