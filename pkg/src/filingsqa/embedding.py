"""Deterministic text embeddings via signed character n-gram hashing.

The embedder is the pluggable stand-in for a neural embedding model: it maps
text to a fixed-dimension unit vector, deterministically, with no external
dependencies. A remote embedding provider can be substituted behind the same
(text -> unit vector) contract.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# Salt mixed into the bucket hash to derive an independent sign hash.
_SIGN_SALT = 0x9E3779B9


@dataclass(frozen=True)
class EmbedderConfig:
    """Parameters of the hashing embedder.

    `seed` salts both hashes, so different seeds produce unrelated vector
    spaces while keeping every self-similarity at 1.
    """

    dim: int = 256
    ngram_min: int = 3
    ngram_max: int = 5
    seed: int = 17

    def __post_init__(self) -> None:
        if self.dim < 8:
            raise ValueError(f"dim must be >= 8, got {self.dim}")
        if not (1 <= self.ngram_min <= self.ngram_max):
            raise ValueError(
                f"need 1 <= ngram_min <= ngram_max, got {self.ngram_min}..{self.ngram_max}"
            )


def normalize_text(text: str) -> str:
    """Lowercase and collapse all whitespace runs to single spaces."""
    return " ".join(text.lower().split())


def ngram_bucket(gram: str, cfg: EmbedderConfig) -> int:
    """Bucket index a character n-gram hashes to under `cfg`."""
    return zlib.crc32(gram.encode("utf-8"), cfg.seed & 0xFFFFFFFF) % cfg.dim


def ngram_sign(gram: str, cfg: EmbedderConfig) -> float:
    """Sign (+1/-1) a character n-gram contributes under `cfg`."""
    h = zlib.crc32(gram.encode("utf-8"), (cfg.seed ^ _SIGN_SALT) & 0xFFFFFFFF)
    return 1.0 if h & 1 == 0 else -1.0


@lru_cache(maxsize=65536)
def _embed_cached(text: str, cfg: EmbedderConfig) -> np.ndarray:
    buckets = np.zeros(cfg.dim, dtype=np.float64)
    length = len(text)
    sizes = range(cfg.ngram_min, cfg.ngram_max + 1)
    grams = [text[i : i + n] for n in sizes for i in range(length - n + 1)]
    if not grams:
        # Text shorter than ngram_min: hash the whole string as one gram.
        grams = [text]
    for gram in grams:
        buckets[ngram_bucket(gram, cfg)] += ngram_sign(gram, cfg)
    norm = float(np.linalg.norm(buckets))
    if norm == 0.0:
        # Signed counts can cancel exactly on degenerate inputs; fall back to
        # unsigned counts so embed always returns a unit vector.
        for gram in grams:
            buckets[ngram_bucket(gram, cfg)] += 1.0
        norm = float(np.linalg.norm(buckets))
    out = buckets / norm
    out.flags.writeable = False
    return out


def embed(text: str, cfg: EmbedderConfig = EmbedderConfig()) -> np.ndarray:
    """Embed text as a unit-norm vector of dimension `cfg.dim`.

    Hashes lowercase character n-grams (cfg.ngram_min..cfg.ngram_max) into
    `cfg.dim` signed buckets weighted by term frequency, then L2-normalizes.
    Deterministic for a fixed config; identical text gives bitwise-identical
    vectors. The returned array is read-only (cached); copy before mutating.

    Raises ValueError on empty or whitespace-only input.
    """
    normalized = normalize_text(text)
    if not normalized:
        raise ValueError("empty input")
    return _embed_cached(normalized, cfg)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity dot(u,v)/(|u||v|), in [-1, 1].

    Raises ValueError on dimension mismatch, non-finite values, or a
    zero-norm vector.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        raise ValueError("non-finite vector")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("degenerate vector")
    return float(np.dot(u, v) / (nu * nv))
