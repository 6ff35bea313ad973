"""Composite training objective and prompt optimization.

Per image: encode classes -> global/local posteriors -> foreground/background
decomposition -> weighted (or uniform) background entropy term -> confusable
foreground term; the batch objective is

    l_total = l_id + alpha * l_abs + beta * l_cfr

with each term averaged over the images that actually contribute to it
(images with an empty background or foreground are left out of that term's
denominator). Gradients w.r.t. the shared context vectors are computed in
closed form; all discrete selections and the background weights are
treated as constants within a step.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import background, decomposition, foreground, scoring, textenc
from .textenc import ClassTokens, PromptContext


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, term: str):
        super().__init__(f"non-finite {term} at step {step}")
        self.step = step
        self.term = term


@dataclass
class TrainConfig:
    alpha: float = 0.2
    beta: float = 3.0
    eta: float = background.DEFAULT_ETA
    kappa: Optional[int] = None      # None -> max(1, round(0.2 * M))
    lam: float = foreground.DEFAULT_LAMBDA
    n_class: int = foreground.DEFAULT_N_CLASS
    n_patch: int = foreground.DEFAULT_N_PATCH
    tau: float = scoring.DEFAULT_TAU
    lr: float = 0.002
    momentum: float = 0.9
    steps: int = 200
    batch_size: int = 8
    seed: int = 0
    use_abs: bool = True
    use_cfr: bool = True
    bg_loss_mode: str = "weighted"   # "weighted" or "uniform"
    confusion_reduction: str = "max"
    cfr_renormalize: bool = False
    prompt_length: int = 16
    init_sigma: float = 0.02

    def check(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.bg_loss_mode not in ("weighted", "uniform"):
            raise ValueError(f"unknown bg_loss_mode {self.bg_loss_mode!r}")
        if self.kappa is not None and self.kappa < 1:
            raise ValueError("kappa must be >= 1")

    def effective_kappa(self, n_classes: int) -> int:
        return self.kappa if self.kappa is not None else decomposition.default_kappa(n_classes)

    def weighted_bg(self) -> bool:
        return self.use_abs and self.bg_loss_mode == "weighted"


@dataclass
class LossBreakdown:
    l_id: float
    l_abs: float
    l_cfr: float
    l_total: float


def id_loss(global_probs: np.ndarray, t: int) -> float:
    """Cross entropy of the global posterior against the ground-truth class."""
    if not (0 <= t < len(global_probs)):
        raise ValueError(f"invalid class index {t}")
    return float(-np.log(global_probs[t]))


def _entropy_grad(P: np.ndarray, H: np.ndarray) -> np.ndarray:
    """dH/dz for softmax rows P with entropies H: -p*(log p + H)."""
    logp = np.log(np.where(P > 0, P, 1.0))
    return -P * (logp + H[:, None])


def _xlogx_grad_row(p: np.ndarray, a: int) -> np.ndarray:
    """d(p_a log p_a)/dz over one softmax row p: (1+log p_a) * p_a * (e_a - p)."""
    pa = p[a]
    if pa <= 0:
        return np.zeros_like(p)
    g = -(1.0 + np.log(pa)) * pa * p
    g[a] += (1.0 + np.log(pa)) * pa
    return g


def _image_terms(rec, bank, kappa, cfg: TrainConfig, frozen_w=None):
    """Forward and per-term bank gradients for a single image.

    Returns (l_id, l_bg or None, l_cfr or None, dbank_id, dbank_bg, dbank_cfr).
    A None loss means the image does not contribute to that term.
    """
    f = rec.global_feature.astype(np.float64)
    F = rec.patch_features.astype(np.float64)
    t = rec.label
    tau = cfg.tau
    M = bank.shape[0]

    pg = scoring.softmax((bank @ f) / tau)
    P = scoring.softmax((F @ bank.T) / tau, axis=1)

    l_id = id_loss(pg, t)
    dzg = pg.copy()
    dzg[t] -= 1.0
    dbank_id = np.outer(dzg, f) / tau

    decomp = decomposition.decompose(P, t, kappa)
    dZ_bg = None
    l_bg = None
    if len(decomp.bg) > 0:
        if frozen_w is not None:
            w = frozen_w
            if len(w) != len(decomp.bg):
                raise ValueError("frozen background weights out of sync with decomposition")
        elif cfg.weighted_bg():
            r = background.attention_scores(rec.patch_queries[decomp.bg].astype(np.float64),
                                            rec.global_key.astype(np.float64))
            w = background.calibrated_weights(r, float(pg[t]), cfg.eta)
        else:
            w = np.ones(len(decomp.bg))
        Pbg = P[decomp.bg]
        H = decomposition.entropy(Pbg)
        l_bg = float(-(w @ H) / len(decomp.bg))
        # d(-w_j H_j / n)/dz = (w_j / n) * p * (log p + H)
        dZ_bg = np.zeros_like(P)
        dZ_bg[decomp.bg] = -(w[:, None] / len(decomp.bg)) * _entropy_grad(Pbg, H)

    dZ_cfr = None
    l_cfr = None
    if cfg.use_cfr and len(decomp.fg) > 0 and M >= 2:
        _, _, s_fusion = foreground.class_similarities(bank, f, t, cfg.lam)
        classes = foreground.select_confusable_classes(s_fusion, t, cfg.n_class)
        _, patches = foreground.select_confusable_patches(
            F[decomp.fg], bank, classes, cfg.n_patch,
            fg_indices=decomp.fg, reduction=cfg.confusion_reduction)
        l_cfr = foreground.cfr_loss(P, patches, classes, t, renormalize=cfg.cfr_renormalize)
        dZ_cfr = np.zeros_like(P)
        coef = 1.0 / (len(classes) * len(patches))
        for j in patches:
            p = P[j]
            if cfg.cfr_renormalize:
                for c in classes:
                    pt_, pc_ = p[t], p[c]
                    s = pt_ + pc_
                    if pt_ <= 0 or pc_ <= 0:
                        continue
                    dphi_dpt = np.log(pt_ / pc_) * pc_ / s ** 2
                    dphi_dpc = -np.log(pt_ / pc_) * pt_ / s ** 2
                    g = -(dphi_dpt * pt_ + dphi_dpc * pc_) * p
                    g[t] += dphi_dpt * pt_
                    g[c] += dphi_dpc * pc_
                    dZ_cfr[j] += coef * g
            else:
                dZ_cfr[j] += coef * len(classes) * _xlogx_grad_row(p, t)
                for c in classes:
                    dZ_cfr[j] += coef * _xlogx_grad_row(p, c)

    dbank_bg = dZ_bg.T @ F / tau if dZ_bg is not None else None
    dbank_cfr = dZ_cfr.T @ F / tau if dZ_cfr is not None else None
    return l_id, l_bg, l_cfr, dbank_id, dbank_bg, dbank_cfr


def _frozen_bg_weights(batch, ctx: PromptContext, tokens: ClassTokens, cfg: TrainConfig):
    """Per-image calibrated background weights at the current context.

    Used by fd_check: the weights are stop-gradient constants, so the
    differenced objective must hold them fixed while the context moves.
    """
    bank = textenc.encode_with_cache(ctx, tokens).bank
    kappa = cfg.effective_kappa(bank.shape[0])
    out = []
    for rec in batch:
        f = rec.global_feature.astype(np.float64)
        F = rec.patch_features.astype(np.float64)
        pg = scoring.softmax((bank @ f) / cfg.tau)
        P = scoring.softmax((F @ bank.T) / cfg.tau, axis=1)
        decomp = decomposition.decompose(P, rec.label, kappa)
        if len(decomp.bg) == 0 or not cfg.weighted_bg():
            out.append(None)
            continue
        r = background.attention_scores(rec.patch_queries[decomp.bg].astype(np.float64),
                                        rec.global_key.astype(np.float64))
        out.append(background.calibrated_weights(r, float(pg[rec.label]), cfg.eta))
    return out


def _batch_pass(batch, ctx: PromptContext, tokens: ClassTokens, cfg: TrainConfig,
                with_grad: bool, frozen_w=None):
    cache = textenc.encode_with_cache(ctx, tokens)
    bank = cache.bank
    kappa = cfg.effective_kappa(bank.shape[0])

    sum_id = 0.0
    sum_bg, n_bg = 0.0, 0
    sum_cfr, n_cfr = 0.0, 0
    g_id = np.zeros_like(bank)
    g_bg = np.zeros_like(bank)
    g_cfr = np.zeros_like(bank)
    for k, rec in enumerate(batch):
        fw = frozen_w[k] if frozen_w is not None else None
        l_id, l_bg, l_cfr, db_id, db_bg, db_cfr = _image_terms(rec, bank, kappa, cfg, frozen_w=fw)
        sum_id += l_id
        g_id += db_id
        if l_bg is not None:
            sum_bg += l_bg
            n_bg += 1
            g_bg += db_bg
        if l_cfr is not None:
            sum_cfr += l_cfr
            n_cfr += 1
            g_cfr += db_cfr

    n = len(batch)
    l_id = sum_id / n
    l_abs = sum_bg / n_bg if n_bg else 0.0
    l_cfr = sum_cfr / n_cfr if n_cfr else 0.0
    l_total = l_id + cfg.alpha * l_abs + cfg.beta * l_cfr
    breakdown = LossBreakdown(l_id=l_id, l_abs=l_abs, l_cfr=l_cfr, l_total=l_total)
    if not with_grad:
        return breakdown, None

    dbank = g_id / n
    if n_bg:
        dbank = dbank + cfg.alpha * g_bg / n_bg
    if cfg.use_cfr and n_cfr:
        dbank = dbank + cfg.beta * g_cfr / n_cfr
    grad = textenc.context_gradient(dbank, cache)
    return breakdown, grad


def total_loss(batch, ctx: PromptContext, tokens: ClassTokens, cfg: TrainConfig) -> LossBreakdown:
    cfg.check()
    breakdown, _ = _batch_pass(batch, ctx, tokens, cfg, with_grad=False)
    return breakdown


def grad_total_loss(batch, ctx: PromptContext, tokens: ClassTokens, cfg: TrainConfig):
    """Gradient of the composite objective w.r.t. the context vectors.

    Returns (LossBreakdown, gradient of shape (L, d)).
    """
    cfg.check()
    breakdown, grad = _batch_pass(batch, ctx, tokens, cfg, with_grad=True)
    if not np.isfinite(grad).all():
        raise TrainingDiverged(-1, "gradient")
    return breakdown, grad


def fd_check(batch, ctx: PromptContext, tokens: ClassTokens, cfg: TrainConfig,
             eps: float = 1e-5, max_coords: int = 1000, seed: int = 0) -> float:
    """Compare the analytic gradient against central finite differences.

    Checks every context coordinate (or a seeded random subset above
    max_coords). The reported error is max_i |analytic_i - fd_i| scaled by
    the largest gradient magnitude, so near-zero coordinates do not inflate
    it with differencing noise.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    _, grad = grad_total_loss(batch, ctx, tokens, cfg)
    flat = grad.ravel()
    n = flat.size
    if n > max_coords:
        coords = np.random.default_rng(seed).choice(n, size=max_coords, replace=False)
    else:
        coords = np.arange(n)

    frozen_w = _frozen_bg_weights(batch, ctx, tokens, cfg)
    fd = np.zeros(len(coords))
    base = ctx.vectors.copy()
    for k, i in enumerate(coords):
        for sign in (+1, -1):
            v = base.copy()
            v.ravel()[i] += sign * eps
            breakdown, _ = _batch_pass(batch, PromptContext(v), tokens, cfg,
                                       with_grad=False, frozen_w=frozen_w)
            fd[k] += sign * breakdown.l_total
        fd[k] /= 2 * eps
    scale = max(np.abs(flat[coords]).max(), np.abs(fd).max(), 1e-12)
    return float(np.abs(flat[coords] - fd).max() / scale)


@dataclass
class TrainResult:
    context: PromptContext
    history: list[LossBreakdown] = field(default_factory=list)


def train(train_ds, tokens: ClassTokens, cfg: TrainConfig,
          ctx: Optional[PromptContext] = None) -> TrainResult:
    """SGD with momentum on the context vectors; deterministic per seed."""
    cfg.check()
    rng = np.random.default_rng(cfg.seed)
    if ctx is None:
        ctx = textenc.init_prompt(cfg.prompt_length, train_ds.d, cfg.init_sigma, cfg.seed)
    else:
        ctx = replace(ctx, vectors=ctx.vectors.copy())

    records = train_ds.records
    velocity = np.zeros_like(ctx.vectors)
    history = []
    for step in range(cfg.steps):
        size = min(cfg.batch_size, len(records))
        idx = rng.choice(len(records), size=size, replace=False)
        batch = [records[i] for i in idx]
        breakdown, grad = grad_total_loss(batch, ctx, tokens, cfg)
        if not np.isfinite(breakdown.l_total):
            raise TrainingDiverged(step, "loss")
        history.append(breakdown)
        velocity = cfg.momentum * velocity + grad
        ctx.vectors = ctx.vectors - cfg.lr * velocity
    return TrainResult(context=ctx, history=history)
