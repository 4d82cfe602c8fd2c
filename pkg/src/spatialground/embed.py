"""Deterministic concept embeddings used in place of a vision-language encoder."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

DEFAULT_CANONICALS = ("object", "things", "stuff", "texture")

DEFAULT_SYNONYMS = {
    "cup": "mug",
    "couch": "sofa",
    "tv": "monitor",
    "screen": "monitor",
    "bin": "basket",
    "notepad": "notebook",
    "crate": "box",
    "carton": "box",
}


@dataclass
class Vocabulary:
    seed: int = 0
    dim: int = 64
    synonyms: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_SYNONYMS))

    def canonical(self, token: str) -> str:
        token = token.strip().lower()
        return self.synonyms.get(token, token)

    @classmethod
    def from_json(cls, path) -> "Vocabulary":
        d = json.loads(Path(path).read_text())
        return cls(int(d.get("seed", 0)), int(d.get("dim", 64)), dict(d.get("synonyms", DEFAULT_SYNONYMS)))

    def to_json(self) -> dict:
        return {"seed": self.seed, "dim": self.dim, "synonyms": dict(sorted(self.synonyms.items()))}


@dataclass
class QueryContext:
    query: np.ndarray
    canonicals: list[np.ndarray]

    def __post_init__(self):
        if not self.canonicals:
            raise ValueError("a query context needs at least one canonical phrase")


def _seed_from(*parts) -> int:
    h = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@lru_cache(maxsize=4096)
def _unit_vector(seed: int, dim: int, *key) -> np.ndarray:
    rng = np.random.default_rng(_seed_from(seed, dim, *key))
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    v.setflags(write=False)
    return v


def embed_concept(vocab: Vocabulary, token: str) -> np.ndarray:
    if not token or not token.strip():
        raise ValueError("empty concept token")
    return _unit_vector(vocab.seed, vocab.dim, "concept", vocab.canonical(token))


def mask_embedding(vocab: Vocabulary, category: str, view_id: int, noise: float) -> np.ndarray:
    """Concept embedding perturbed by a view-seeded offset of norm ``noise``, renormalized.

    The angular deviation from the clean concept is at most ``arcsin(noise)``.
    """
    if not 0.0 <= noise <= 0.5:
        raise ValueError("noise must lie in [0, 0.5]")
    base = embed_concept(vocab, category)
    if noise == 0.0:
        return base
    offset = _unit_vector(vocab.seed, vocab.dim, "view", vocab.canonical(category), int(view_id))
    v = base + noise * offset
    return v / np.linalg.norm(v)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b))


def make_context(vocab: Vocabulary, token: str, canonicals=DEFAULT_CANONICALS) -> QueryContext:
    return QueryContext(embed_concept(vocab, token), [embed_concept(vocab, c) for c in canonicals])
