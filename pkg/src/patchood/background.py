"""Adaptive background suppression.

Background patches are weighted by how strongly the frozen attention ties
them to the global token: r = softmax(Q K^T / sqrt(d_k)) over the
background patches, calibrated by the global true-class probability
through w_i = sigmoid(eta * p_true * r_i), and applied to the per-patch
entropy term. The weights are treated as constants during training;
gradients flow only through the entropies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decomposition import entropy

DEFAULT_ETA = 5.0


@dataclass
class CorrelationWeights:
    r: np.ndarray       # attention distribution over background patches
    w: np.ndarray       # calibrated per-patch weights, each in (0, 1)
    eta: float
    p_true: float


def attention_scores(queries: np.ndarray, key: np.ndarray) -> np.ndarray:
    """Scaled-dot-product attention of background queries against the
    global key, softmax-normalized over the patch axis."""
    key = np.asarray(key).reshape(-1)
    if queries.ndim != 2 or queries.shape[1] != key.shape[0]:
        raise ValueError(f"query/key dimension mismatch: {queries.shape} vs {key.shape}")
    if queries.shape[0] < 1:
        raise ValueError("need at least one background patch")
    logits = (queries @ key) / np.sqrt(key.shape[0])
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def calibrated_weights(r: np.ndarray, p_true: float, eta: float = DEFAULT_ETA) -> np.ndarray:
    """Sigmoid calibration of attention scores by the true-class probability."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    z = eta * p_true * np.asarray(r, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(-z))


def abs_loss(local_probs: np.ndarray, bg: np.ndarray, w: np.ndarray) -> float:
    """Weighted negative mean entropy over background rows.

    Reduces to the uniform background loss when all weights are 1; returns
    0 for an empty background set.
    """
    if len(bg) == 0:
        return 0.0
    if len(w) != len(bg):
        raise ValueError(f"weight/background length mismatch: {len(w)} vs {len(bg)}")
    return float(-(np.asarray(w) @ entropy(local_probs[bg])) / len(bg))
