"""Word vectors (GloVe text format), phrase embedding and the two string distances
used by the mapper."""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "EmbeddingTable",
    "ZeroVector",
    "load_embeddings",
    "embed_phrase",
    "semantic_distance",
    "edit_distance",
]


class ZeroVector(ValueError):
    def __init__(self, phrase):
        self.phrase = phrase
        super().__init__(f"phrase {phrase!r} embeds to the zero vector")


def _phrase_tokens(phrase) -> list[str]:
    if isinstance(phrase, str):
        return phrase.split()
    return list(phrase)


class EmbeddingTable:
    """Token -> vector map. Lookups are case-folded; unknown tokens get a
    deterministic vector drawn uniformly from [-0.05, 0.05] seeded by the token."""

    def __init__(self, vectors: dict[str, np.ndarray], dim: int | None = None,
                 unknown_scale: float = 0.05, seed: int = 0):
        if dim is None:
            if not vectors:
                raise ValueError("dim is required for an empty table")
            dim = len(next(iter(vectors.values())))
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.unknown_scale = unknown_scale
        self.seed = seed
        self.vectors: dict[str, np.ndarray] = {}
        for tok, vec in vectors.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (dim,):
                raise ValueError(f"vector for {tok!r} has shape {vec.shape}, expected ({dim},)")
            self.vectors[tok.lower()] = vec
        self._unknown: dict[str, np.ndarray] = {}

    def __contains__(self, token: str) -> bool:
        return token.lower() in self.vectors

    def __len__(self):
        return len(self.vectors)

    def unknown_vector(self, token: str) -> np.ndarray:
        token = token.lower()
        vec = self._unknown.get(token)
        if vec is None:
            digest = hashlib.sha256(f"{self.seed}:{token}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vec = rng.uniform(-self.unknown_scale, self.unknown_scale, self.dim)
            self._unknown[token] = vec
        return vec

    def lookup(self, token: str) -> np.ndarray:
        vec = self.vectors.get(token.lower())
        return vec if vec is not None else self.unknown_vector(token)


def load_embeddings(path, vocab: Iterable[str] | None = None, limit: int | None = None) -> EmbeddingTable:
    """Read ``token v1 ... vd`` lines. ``dim`` comes from the first line.

    ``vocab`` restricts loading to the given (case-folded) tokens, which keeps
    memory bounded for the 2M-word GloVe files. Tokens containing spaces (some
    840B entries) are handled by taking the last ``dim`` fields as the vector.
    """
    wanted = {w.lower() for w in vocab} if vocab is not None else None
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with open(Path(path), encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if len(parts) < 2:
                continue
            if dim is None:
                if len(parts) == 2 and lineno == 1 and all(p.isdigit() for p in parts):
                    continue  # word2vec-style "count dim" header
                dim = len(parts) - 1
            if len(parts) - 1 < dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} values")
            token = " ".join(parts[: len(parts) - dim]).lower()
            if wanted is not None and token not in wanted:
                continue
            if token in vectors:
                continue
            vectors[token] = np.asarray(parts[len(parts) - dim:], dtype=np.float64)
            if limit is not None and len(vectors) >= limit:
                break
    if dim is None:
        raise ValueError(f"{path}: no vectors")
    return EmbeddingTable(vectors, dim)


def embed_phrase(tokens: Sequence[str] | str, E: EmbeddingTable) -> np.ndarray:
    toks = _phrase_tokens(tokens)
    if not toks:
        raise ValueError("cannot embed an empty phrase")
    return np.mean([E.lookup(t) for t in toks], axis=0)


def semantic_distance(a, b, E: EmbeddingTable) -> float:
    """1 - cosine similarity of the averaged phrase vectors; in [0, 2]."""
    va, vb = embed_phrase(a, E), embed_phrase(b, E)
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0:
        raise ZeroVector(a)
    if nb == 0.0:
        raise ZeroVector(b)
    cos = float(np.dot(va, vb) / (na * nb))
    return float(min(2.0, max(0.0, 1.0 - cos)))


def edit_distance(a: str, b: str) -> int:
    """Case-insensitive Levenshtein distance with unit costs."""
    a, b = a.lower(), b.lower()
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]
