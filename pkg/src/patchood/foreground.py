"""Confusable foreground rectification.

Classes similar to the ground truth are found by fusing text-text and
image-text similarity; the foreground patches most similar to those
classes are then pushed toward indecision between the true class and each
confusable class by an entropy-maximization term on the pairwise
p*log(p) contributions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_N_CLASS = 2
DEFAULT_N_PATCH = 3
DEFAULT_LAMBDA = 0.5


@dataclass
class ConfusionSelection:
    s_txt: np.ndarray
    s_vis: np.ndarray
    s_fusion: np.ndarray
    lam: float
    classes: np.ndarray        # confusable class indices (true class excluded)
    patch_scores: np.ndarray   # per-foreground-patch confusability score
    patches: np.ndarray        # selected foreground patch indices


def class_similarities(bank: np.ndarray, f: np.ndarray, t: int, lam: float = DEFAULT_LAMBDA):
    """Text, visual and fused per-class similarity vectors."""
    if not (0.0 <= lam <= 1.0):
        raise ValueError("lambda must be in [0, 1]")
    if not (0 <= t < bank.shape[0]):
        raise ValueError(f"invalid class index {t}")
    if bank.shape[1] != np.shape(f)[0]:
        raise ValueError("feature/bank dimension mismatch")
    s_txt = bank @ bank[t]
    s_vis = bank @ f
    s_fusion = lam * s_txt + (1.0 - lam) * s_vis
    return s_txt, s_vis, s_fusion


def _top_k(scores: np.ndarray, k: int, exclude: int | None = None) -> np.ndarray:
    """Indices of the k highest scores; ties go to the smaller index."""
    idx = np.arange(len(scores))
    if exclude is not None:
        idx = idx[idx != exclude]
    order = idx[np.lexsort((idx, -scores[idx]))]
    return np.sort(order[:k])


def select_confusable_classes(s_fusion: np.ndarray, t: int, n_class: int = DEFAULT_N_CLASS) -> np.ndarray:
    """The n_class non-true classes with highest fused similarity."""
    if n_class < 1:
        raise ValueError("n_class must be >= 1")
    if len(s_fusion) < 2:
        raise ValueError("need at least two classes to pick a confusable one")
    return _top_k(s_fusion, n_class, exclude=t)


def select_confusable_patches(fg_features: np.ndarray, bank: np.ndarray,
                              classes: np.ndarray, n_patch: int = DEFAULT_N_PATCH,
                              fg_indices: np.ndarray | None = None,
                              reduction: str = "max"):
    """Score foreground patches by similarity to the confusable classes and
    pick the top n_patch.

    The per-patch score reduces the patch-vs-class similarity matrix over
    classes with ``max`` (worst-case confusability) by default; ``mean`` is
    available for ablation. Returned indices are positions in fg_features
    unless fg_indices maps them back to original patch indices.
    """
    if len(classes) == 0:
        raise ValueError("classes must be nonempty")
    if fg_features.ndim != 2 or fg_features.shape[0] == 0:
        raise ValueError("foreground feature set must be nonempty")
    sims = fg_features @ bank[np.asarray(classes)].T
    if reduction == "max":
        patch_scores = sims.max(axis=1)
    elif reduction == "mean":
        patch_scores = sims.mean(axis=1)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    picked = _top_k(patch_scores, n_patch)
    if fg_indices is not None:
        picked = np.asarray(fg_indices)[picked]
    return patch_scores, picked


def _xlogx(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)


def cfr_loss(local_probs: np.ndarray, patches: np.ndarray, classes: np.ndarray, t: int,
             renormalize: bool = False) -> float:
    """Mean over (confusable class, selected patch) pairs of
    p_t*log(p_t) + p_c*log(p_c), probabilities from the M-way rows.

    Minimizing drives both probabilities toward 1/e; value in [-2/e, 0].
    With ``renormalize`` the pair is rescaled to a binary distribution
    first (true binary entropy, value in [-ln 2, 0]).
    """
    classes = np.asarray(classes)
    patches = np.asarray(patches)
    if t in classes:
        raise ValueError("true class must not be among the confusable classes")
    if len(patches) == 0 or len(classes) == 0:
        return 0.0
    pt = local_probs[patches, t]                      # (n_patch,)
    pc = local_probs[np.ix_(patches, classes)]        # (n_patch, n_class)
    if renormalize:
        q = pt[:, None] / (pt[:, None] + pc)
        total = (_xlogx(q) + _xlogx(1.0 - q)).sum()
    else:
        total = len(classes) * _xlogx(pt).sum() + _xlogx(pc).sum()
    return float(total / (len(classes) * len(patches)))
