"""Posterior computation and test-time OOD scores (MCM, L-MCM, GL-MCM)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_TAU = 0.01  # frozen-CLIP convention (logit scale ~ 100)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtraction)."""
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass
class PosteriorMatrix:
    global_probs: np.ndarray  # (M,)
    local_probs: np.ndarray   # (N, M), row i = per-class posterior of patch i
    tau: float


@dataclass
class ScoreRecord:
    mcm: float
    lmcm: float
    glmcm: float


def posteriors(rec, bank: np.ndarray, tau: float = DEFAULT_TAU) -> PosteriorMatrix:
    """Global and per-patch class posteriors at temperature tau.

    Features and bank rows are unit-norm, so similarity is a dot product.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    global_sims = bank @ rec.global_feature
    local_sims = rec.patch_features @ bank.T
    if not (np.isfinite(global_sims).all() and np.isfinite(local_sims).all()):
        raise ValueError("non-finite similarity")
    return PosteriorMatrix(
        global_probs=softmax(global_sims / tau),
        local_probs=softmax(local_sims / tau, axis=1),
        tau=tau,
    )


def mcm_score(global_probs: np.ndarray) -> float:
    """Maximum global softmax posterior."""
    return float(np.max(global_probs))


def lmcm_score(local_probs: np.ndarray) -> float:
    """Maximum entry of the per-patch posterior matrix."""
    return float(np.max(local_probs))


def glmcm_score(pm: PosteriorMatrix) -> ScoreRecord:
    """MCM, L-MCM and their sum (same float evaluation order everywhere)."""
    mcm = mcm_score(pm.global_probs)
    lmcm = lmcm_score(pm.local_probs)
    return ScoreRecord(mcm=mcm, lmcm=lmcm, glmcm=mcm + lmcm)


def detect(score: float, gamma: float) -> int:
    """1 (ID) iff score >= gamma, else 0 (OOD). The boundary counts as ID."""
    return 1 if score >= gamma else 0
