"""Toy vocabulary, token sequences and the fixed token embedder.

The embedder stands in for a pretrained text encoder: each token id maps to a
pseudo-random unit vector derived from the id alone, so rows are independent
and bit-reproducible.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .seeding import derive_rng

__all__ = ["Vocabulary", "TokenSequence", "embed_tokens", "DEFAULT_WORDS",
           "COLORS", "SHAPES", "POSITIONS", "MAX_TOKENS"]

MAX_TOKENS = 16

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.1),
    "blue": (0.1, 0.2, 0.9),
    "yellow": (0.95, 0.9, 0.1),
    "magenta": (0.9, 0.1, 0.85),
    "cyan": (0.1, 0.85, 0.9),
}
SHAPES = ("square", "circle", "triangle")
POSITIONS = ("left", "right")
DEFAULT_WORDS = ("a", "and", *COLORS, *SHAPES, *POSITIONS)


class UnknownTokenError(KeyError):
    pass


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        if not 1 <= len(ids) <= MAX_TOKENS:
            raise ValueError(f"token sequences hold 1..{MAX_TOKENS} tokens, got {len(ids)}")
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.ids)


class Vocabulary:
    def __init__(self, words: Iterable[str] = DEFAULT_WORDS):
        self.words = list(words)
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate words in vocabulary")
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, words: Sequence[str]) -> TokenSequence:
        try:
            return TokenSequence(tuple(self.index[w] for w in words))
        except KeyError as e:
            raise UnknownTokenError(f"word {e.args[0]!r} not in vocabulary") from None

    def decode(self, seq: TokenSequence) -> list[str]:
        return [self.words[i] for i in seq.ids]

    def to_json(self) -> str:
        return json.dumps(self.index, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        index = json.loads(text)
        words = sorted(index, key=index.get)
        if [index[w] for w in words] != list(range(len(words))):
            raise ValueError("vocabulary ids must be 0..n-1")
        return cls(words)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text())


def _token_row(token_id: int, embed_dim: int) -> np.ndarray:
    v = derive_rng(token_id, 0, "token-embedding").standard_normal(embed_dim)
    return v / np.linalg.norm(v)


def embed_tokens(seq: TokenSequence, embed_dim: int, vocab_size: int | None = None,
                 dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """``(L, embed_dim)`` matrix of unit rows, one per token."""
    if vocab_size is not None:
        bad = [i for i in seq.ids if not 0 <= i < vocab_size]
        if bad:
            raise UnknownTokenError(f"token ids {bad} outside vocabulary of size {vocab_size}")
    rows = np.stack([_token_row(i, embed_dim) for i in seq.ids])
    return torch.from_numpy(rows).to(dtype)
