"""Surrogate prompt-learning text pathway.

Learnable context vectors v_1..v_L plus frozen per-class tokens produce
unit-norm class embeddings:

    g_m = normalize(W @ mean(v_1..v_L) + token_m)

The map is differentiable in the context vectors; the frozen mix matrix W
and the class tokens never receive gradients. This keeps exactly what the
training losses exercise (a differentiable shared-context -> per-class
unit-embedding map) without a transformer encoder.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

PROMPT_MAGIC = b"FOBP"
PROMPT_VERSION = 1


class EncodingError(ValueError):
    """Raised when class embeddings degenerate (vanishing norm)."""


@dataclass
class PromptContext:
    vectors: np.ndarray  # (L, d)
    learnable: bool = True

    @property
    def length(self) -> int:
        return self.vectors.shape[0]


@dataclass
class ClassTokens:
    tokens: np.ndarray           # (M, d), frozen
    mix: np.ndarray | None = None  # (d, d) frozen linear map, identity if None

    def mix_matrix(self) -> np.ndarray:
        if self.mix is None:
            return np.eye(self.tokens.shape[1])
        return self.mix


@dataclass
class EncodeCache:
    """Intermediates needed to pull a bank gradient back to the context."""

    bank: np.ndarray      # (M, d) unit rows
    norms: np.ndarray     # (M,) norms of the pre-normalization vectors
    mix: np.ndarray       # (d, d)
    length: int           # number of context vectors


def init_prompt(length: int, d: int, init_sigma: float = 0.02, seed: int = 0) -> PromptContext:
    """CoOp-style Gaussian initialization, deterministic per seed."""
    if length < 1 or d < 1:
        raise ValueError("length and d must be >= 1")
    rng = np.random.default_rng(seed)
    return PromptContext(vectors=init_sigma * rng.standard_normal((length, d)))


def encode_classes(ctx: PromptContext, tokens: ClassTokens) -> np.ndarray:
    """Return the (M, d) bank of unit-norm class embeddings."""
    return encode_with_cache(ctx, tokens).bank


def encode_with_cache(ctx: PromptContext, tokens: ClassTokens) -> EncodeCache:
    W = tokens.mix_matrix()
    mean_ctx = ctx.vectors.mean(axis=0)
    raw = tokens.tokens + (W @ mean_ctx)[None, :]
    norms = np.linalg.norm(raw, axis=1)
    if np.any(norms < 1e-12):
        m = int(np.argmin(norms))
        raise EncodingError(f"degenerate class embedding for class {m} (norm {norms[m]:.3e})")
    bank = raw / norms[:, None]
    return EncodeCache(bank=bank, norms=norms, mix=W, length=ctx.length)


def context_gradient(dbank: np.ndarray, cache: EncodeCache) -> np.ndarray:
    """Pull back dL/dbank (M, d) to dL/dcontext_vectors (L, d).

    Chains through the row normalization, the frozen linear map and the
    context mean. Every context vector receives the same gradient.
    """
    # normalization: d(u/|u|) pullback = (g - (g.b) b) / |u| per row
    inner = np.sum(dbank * cache.bank, axis=1, keepdims=True)
    draw = (dbank - inner * cache.bank) / cache.norms[:, None]
    dmean = cache.mix.T @ draw.sum(axis=0)
    return np.tile(dmean / cache.length, (cache.length, 1))


def save_prompt(ctx: PromptContext, path) -> None:
    L, d = ctx.vectors.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIII", PROMPT_MAGIC, PROMPT_VERSION, L, d))
        fh.write(np.ascontiguousarray(ctx.vectors, dtype="<f4").tobytes())


def load_prompt(path) -> PromptContext:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise EncodingError("truncated prompt checkpoint")
    magic, version, L, d = struct.unpack_from("<4sIII", blob, 0)
    if magic != PROMPT_MAGIC:
        raise EncodingError("bad magic")
    if version != PROMPT_VERSION:
        raise EncodingError(f"unsupported version {version}")
    if len(blob) != 16 + 4 * L * d:
        raise EncodingError("truncated prompt payload")
    vectors = np.frombuffer(blob, dtype="<f4", count=L * d, offset=16).astype(np.float64).reshape(L, d)
    return PromptContext(vectors=vectors)


def class_tokens_from_dataset(train) -> ClassTokens:
    """Frozen class tokens as normalized per-class mean global features."""
    M, d = train.n_classes, train.d
    sums = np.zeros((M, d))
    counts = np.zeros(M)
    for rec in train.records:
        sums[rec.label] += rec.global_feature
        counts[rec.label] += 1
    if np.any(counts == 0):
        missing = int(np.argmin(counts))
        raise ValueError(f"no training records for class {missing}")
    means = sums / counts[:, None]
    return ClassTokens(tokens=means / np.linalg.norm(means, axis=1, keepdims=True))
