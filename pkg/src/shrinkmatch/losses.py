"""Batch losses. Every loss returns its value together with the gradient
w.r.t. the logits it depends on; weak-view quantities are treated as
constants (detached targets).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, ShapeError
from .kernels import batch_cutoffs, batch_shrunk_ce
from .nn import _as_logits, hard_ce_rows, soft_ce_rows, softmax

DA_EPS = 1e-6


@dataclass
class BatchLossReport:
    loss_x: float
    loss_u: float
    loss_s: float
    total: float
    certain_ratio: float
    n_certain: int
    n_uncertain: int
    per_sample_weights: np.ndarray     # original-space confidence of each uncertain sample
    cutoffs: np.ndarray                # K per uncertain sample (empty when shrinking is off)
    certain_mask: np.ndarray
    pseudo_labels: np.ndarray          # weak top-1 class per unlabeled sample
    gate: float = 1.0                  # factor in front of L_s (m_g, schedule, or 1)

    @property
    def batch_size_u(self) -> int:
        return self.n_certain + self.n_uncertain

    @property
    def removed_counts(self) -> np.ndarray:
        return self.cutoffs - 2


def supervised_loss(logits, labels) -> tuple[float, np.ndarray]:
    """Mean hard CE over a labeled batch and its gradient."""
    z = _as_logits(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise InvalidInputError("supervised_loss needs a non-empty (B, C) batch")
    if labels.shape != (z.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {z.shape[0]}")
    if labels.min() < 0 or labels.max() >= z.shape[1]:
        raise IndexError("label out of range")
    losses, grad = hard_ce_rows(z, labels)
    n = z.shape[0]
    return float(losses.sum() / n), grad / n


def batch_certain_ratio(weak_logits, tau: float) -> float:
    conf = softmax(weak_logits).max(axis=1)
    return float(np.count_nonzero(conf >= tau) / conf.shape[0])


def certain_loss(weak_logits, strong_logits, tau: float, mode: str = "hard", mask_logits=None):
    """Thresholded weak-to-strong consistency on confident samples.

    ``weak_logits`` may already be distribution-aligned log-probabilities;
    ``mask_logits`` (default: ``weak_logits``) decides which samples are
    certain. Returns ``(L_u, certain_mask, grad_strong)``; the average is over
    the whole unlabeled batch.
    """
    w = _as_logits(weak_logits)
    s = _as_logits(strong_logits)
    if w.shape != s.shape:
        raise ShapeError(f"weak {w.shape} and strong {s.shape} batches differ")
    n = w.shape[0]
    p = softmax(w)
    mask = (p if mask_logits is None else softmax(mask_logits)).max(axis=1) >= tau
    if mode == "hard":
        losses, grad = hard_ce_rows(s, p.argmax(axis=1))
    elif mode == "soft":
        losses, grad = soft_ce_rows(s, p)
    else:
        raise ValueError(f"unknown label mode {mode!r}")
    m = mask.astype(np.float64)
    value = float((losses * m).sum() / n)
    return value, mask, grad * (m / n)[:, None]


def uncertain_loss(weak_logits, strong_logits, tau: float, m_g: float, *,
                   confidence_weight: bool = True, shrink: bool = True,
                   label_mode: str = "hard", return_details: bool = False):
    """Reweighted consistency loss for uncertain samples in their shrunk spaces.

    ``L_s = m_g / B_u * sum_{uncertain} CE_shrunk(weak, strong) * conf(weak)``

    ``m_g`` is the model-state gate (the global certain ratio, a linear
    schedule value, or 1 to disable it). ``confidence_weight=False`` drops the
    per-sample original-space confidence factor. With ``shrink=False`` the
    loss is taken in the full class space instead.

    Returns ``(L_s, grad_strong)``, plus a details dict if requested.
    """
    if not (0.0 <= m_g):
        raise InvalidInputError(f"gate must be non-negative, got {m_g}")
    w = _as_logits(weak_logits)
    s = _as_logits(strong_logits)
    if w.shape != s.shape:
        raise ShapeError(f"weak {w.shape} and strong {s.shape} batches differ")
    if label_mode not in ("hard", "soft"):
        raise ValueError(f"unknown label mode {label_mode!r}")
    n = w.shape[0]
    conf = softmax(w).max(axis=1)
    unc = np.flatnonzero(conf < tau)
    weights = conf[unc]
    grad = np.zeros_like(s)
    cutoffs = np.zeros(0, dtype=np.int64)
    if unc.size == 0:
        value = 0.0
    else:
        wu, su = w[unc], s[unc]
        if shrink:
            order, cut, _ = batch_cutoffs(wu, tau)
            losses, g = batch_shrunk_ce(su, wu, order, cut, soft=label_mode == "soft")
            cutoffs = cut
        elif label_mode == "hard":
            losses, g = hard_ce_rows(su, wu.argmax(axis=1))
        else:
            losses, g = soft_ce_rows(su, softmax(wu))
        factor = (weights if confidence_weight else np.ones_like(weights)) * (m_g / n)
        value = float((losses * factor).sum())
        grad[unc] = g * factor[:, None]
    if return_details:
        return value, grad, {"uncertain": unc, "weights": weights, "cutoffs": cutoffs}
    return value, grad


def total_loss(loss_x: float, loss_u: float, loss_s: float, lambda_u: float = 1.0) -> float:
    return loss_x + lambda_u * (loss_u + loss_s)


# --------------------------------------------------------------------------
# distribution alignment


@dataclass
class AlignmentState:
    """Running mean of weak-view class probabilities for distribution alignment."""

    n_classes: int
    momentum: float = 0.999
    running_mean: np.ndarray = None
    target: np.ndarray = None

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.full(self.n_classes, 1.0 / self.n_classes)
        if self.target is None:
            self.target = np.full(self.n_classes, 1.0 / self.n_classes)
        self.running_mean = np.asarray(self.running_mean, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)

    def copy(self) -> "AlignmentState":
        return AlignmentState(self.n_classes, self.momentum, self.running_mean.copy(), self.target.copy())


def align_distribution(probs, state: AlignmentState, update: bool = True) -> np.ndarray:
    """``normalize(p * target / running_mean)``, then fold the batch mean of raw
    ``p`` into the running mean (when ``update``)."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-9):
        raise InvalidInputError("align_distribution expects normalised probabilities")
    ratio = state.target / np.maximum(state.running_mean, DA_EPS)
    q = p * ratio
    q = q / q.sum(axis=-1, keepdims=True)
    if update:
        batch_mean = p.reshape(-1, p.shape[-1]).mean(axis=0)
        state.running_mean = state.momentum * state.running_mean + (1.0 - state.momentum) * batch_mean
    return q


def aligned_logits(weak_logits, state: AlignmentState, update: bool = True) -> np.ndarray:
    """Log of the aligned weak probabilities, usable wherever weak logits are."""
    q = align_distribution(softmax(weak_logits), state, update=update)
    return np.log(np.maximum(q, np.finfo(np.float64).tiny))
