"""Foreground/background patch decomposition by true-class rank, and the
uniform background entropy loss it feeds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Decomposition:
    fg: np.ndarray     # sorted foreground patch indices
    bg: np.ndarray     # sorted background patch indices
    kappa: int
    ranks: np.ndarray  # (N,) 1-based rank of the true class per patch


def entropy(rows: np.ndarray) -> np.ndarray:
    """Shannon entropy (natural log) per row, with 0*log(0) := 0."""
    rows = np.atleast_2d(rows)
    terms = np.where(rows > 0, rows * np.log(np.where(rows > 0, rows, 1.0)), 0.0)
    return -terms.sum(axis=1)


def rank_true_class(local_probs: np.ndarray, t: int) -> np.ndarray:
    """1-based rank of class t in each patch's posterior row.

    Equal probabilities are broken toward the smaller class index, so the
    rank of t also counts ties at classes m < t.
    """
    N, M = local_probs.shape
    if not (0 <= t < M):
        raise ValueError(f"invalid class index {t}")
    pt = local_probs[:, t:t + 1]
    higher = (local_probs > pt).sum(axis=1)
    tied_before = (local_probs[:, :t] == pt).sum(axis=1)
    return 1 + higher + tied_before


def decompose(local_probs: np.ndarray, t: int, kappa: int) -> Decomposition:
    """Split patches into foreground (rank <= kappa) and background."""
    if kappa < 1:
        raise ValueError("kappa must be >= 1 (ranks start at 1)")
    ranks = rank_true_class(local_probs, t)
    fg = np.nonzero(ranks <= kappa)[0]
    bg = np.nonzero(ranks > kappa)[0]
    return Decomposition(fg=fg, bg=bg, kappa=kappa, ranks=ranks)


def default_kappa(n_classes: int) -> int:
    """Separation threshold scaling with the class count."""
    return max(1, int(round(0.2 * n_classes)))


def ood_loss(local_probs: np.ndarray, bg: np.ndarray) -> float:
    """Uniform background suppression: negative mean entropy over bg rows.

    Returns 0 for an empty background set. Value lies in [-ln M, 0].
    """
    if len(bg) == 0:
        return 0.0
    return float(-entropy(local_probs[bg]).sum() / len(bg))
