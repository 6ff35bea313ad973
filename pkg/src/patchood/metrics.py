"""Detection metrics (AUROC, FPR at fixed TPR) and the evaluation harness.

AUROC follows the Mann-Whitney convention (ties count 1/2), computed in
O(n log n) from average ranks; auroc_pairwise is the quadratic
pair-counting oracle used to cross-check it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import scoring, textenc


# AUROC values are reported on a 2^-40 grid (~9e-13 resolution). The grid
# numerator is computed with exact integer arithmetic, so complementary score
# sets always land on complementary grid points and the swap identity
# auroc(a, b) == 1.0 - auroc(b, a) holds as a float identity, not just in
# exact arithmetic. Ties with the grid midpoint are impossible for any
# n_id * n_ood below 2^40, so the rounding direction never matters.
_GRID_BITS = 40


def _quantize(u_twice: int, n_pairs: int) -> float:
    """Round the AUROC with half-integer numerator u_twice / 2 onto the grid."""
    k = (u_twice * (1 << _GRID_BITS) + n_pairs) // (2 * n_pairs)
    return k / float(1 << _GRID_BITS)


def _check_scores(id_scores, ood_scores):
    a = np.asarray(id_scores, dtype=np.float64)
    b = np.asarray(ood_scores, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("score sets must be nonempty")
    return a, b


def auroc(id_scores, ood_scores) -> float:
    """Probability a random ID score exceeds a random OOD score (ties: 1/2)."""
    a, b = _check_scores(id_scores, ood_scores)
    ranks = rankdata(np.concatenate([a, b]), method="average")
    r_id = ranks[: a.size].sum()
    u = r_id - a.size * (a.size + 1) / 2.0
    return _quantize(int(round(2.0 * u)), a.size * b.size)


def auroc_pairwise(id_scores, ood_scores) -> float:
    """O(n^2) pair-counting oracle for auroc."""
    a, b = _check_scores(id_scores, ood_scores)
    wins = int((a[:, None] > b[None, :]).sum())
    ties = int((a[:, None] == b[None, :]).sum())
    return _quantize(2 * wins + ties, a.size * b.size)


def fpr_at_tpr(id_scores, ood_scores, tpr_target: float = 0.95) -> float:
    """FPR on OOD at the largest threshold keeping ID TPR >= tpr_target.

    The threshold is the k-th largest ID score with k = ceil(target * n_id),
    so quantile rounding always favors TPR at or above the target.
    """
    a, b = _check_scores(id_scores, ood_scores)
    if not (0.0 < tpr_target <= 1.0):
        raise ValueError("tpr_target must be in (0, 1]")
    k = int(np.ceil(tpr_target * a.size))
    gamma = np.sort(a)[::-1][k - 1]
    return float(np.mean(b >= gamma))


@dataclass
class SetMetrics:
    auroc: float
    fpr95: float
    n_id: int
    n_ood: int


@dataclass
class EvalReport:
    per_set: dict      # score_fn -> {ood_set_name -> SetMetrics}
    averages: dict     # score_fn -> {"auroc": ..., "fpr95": ...}

    def to_dict(self) -> dict:
        return {
            "per_set": {
                fn: {name: vars(m) for name, m in sets.items()}
                for fn, sets in self.per_set.items()
            },
            "averages": self.averages,
        }


def score_dataset(ds, bank: np.ndarray, tau: float) -> list[scoring.ScoreRecord]:
    out = []
    for rec in ds.records:
        pm = scoring.posteriors(rec, bank, tau)
        out.append(scoring.glmcm_score(pm))
    return out


def evaluate(ctx, tokens: textenc.ClassTokens, id_test, ood_sets: dict,
             tau: float = scoring.DEFAULT_TAU, tpr_target: float = 0.95) -> EvalReport:
    """Score the ID test set and every OOD set with MCM and GL-MCM and
    compute per-set and averaged AUROC / FPR95."""
    bank = textenc.encode_classes(ctx, tokens)
    id_records = score_dataset(id_test, bank, tau)
    per_set = {"mcm": {}, "glmcm": {}}
    for name, ood_ds in ood_sets.items():
        ood_records = score_dataset(ood_ds, bank, tau)
        for fn in ("mcm", "glmcm"):
            id_s = [getattr(s, fn) for s in id_records]
            ood_s = [getattr(s, fn) for s in ood_records]
            per_set[fn][name] = SetMetrics(
                auroc=auroc(id_s, ood_s),
                fpr95=fpr_at_tpr(id_s, ood_s, tpr_target),
                n_id=len(id_s),
                n_ood=len(ood_s),
            )
    averages = {
        fn: {
            "auroc": float(np.mean([m.auroc for m in sets.values()])),
            "fpr95": float(np.mean([m.fpr95 for m in sets.values()])),
        }
        for fn, sets in per_set.items()
        if sets
    }
    return EvalReport(per_set=per_set, averages=averages)
