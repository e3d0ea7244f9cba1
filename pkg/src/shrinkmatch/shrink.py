"""Shrunk class spaces for uncertain samples.

For an uncertain weak-view prediction, classes are sorted by logit and the
confusion classes ``n_2 .. n_{K-1}`` are dropped, with ``K`` the smallest
cutoff for which the top-1 class reaches the confidence threshold in the
remaining space ``{n_1} + {n_K .. n_C}``. Smallest ``K`` means largest space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, InvalidInputError, ShapeError
from .kernels import batch_cutoffs
from .nn import _as_logits


@dataclass(frozen=True)
class SortedLogits:
    order: np.ndarray   # class indices n_1..n_C
    values: np.ndarray  # s_{n_1} >= ... >= s_{n_C}

    @property
    def n_classes(self) -> int:
        return len(self.order)


@dataclass(frozen=True)
class ShrunkSpace:
    cutoff: int
    kept: np.ndarray  # [n_1, n_K, ..., n_C]

    @property
    def removed(self) -> int:
        return self.cutoff - 2


def sort_logits(logits) -> SortedLogits:
    z = _as_logits(logits)
    if z.ndim != 1:
        raise ShapeError("sort_logits expects one logit vector")
    order = np.argsort(-z, kind="stable")
    return SortedLogits(order, z[order])


def _reassembled(sorted_: SortedLogits, k: int) -> np.ndarray:
    c = sorted_.n_classes
    if not (2 <= k <= c + 1):
        raise IndexError(f"cutoff K={k} outside [2, {c + 1}]")
    return np.concatenate([sorted_.values[:1], sorted_.values[k - 1:]])


def shrunk_confidence(sorted_: SortedLogits, k: int) -> float:
    """Top-1 softmax confidence over the re-assembled logits for cutoff ``k``."""
    z = _reassembled(sorted_, k)
    e = np.exp(z - z[0])
    return float(e[0] / e.sum())


def space_for(sorted_: SortedLogits, k: int) -> ShrunkSpace:
    c = sorted_.n_classes
    if not (2 <= k <= c + 1):
        raise IndexError(f"cutoff K={k} outside [2, {c + 1}]")
    kept = np.concatenate([sorted_.order[:1], sorted_.order[k - 1:]])
    return ShrunkSpace(int(k), kept)


def find_cutoff(sorted_: SortedLogits, tau: float) -> int:
    """Minimal ``K`` in ``[3, C+1]`` whose shrunk space makes the top-1 class certain.

    Raises ContractViolation if the sample is already certain in the full space.
    """
    if not (0.0 < tau < 1.0):
        raise InvalidInputError(f"threshold must lie in (0, 1), got {tau}")
    if shrunk_confidence(sorted_, 2) >= tau:
        raise ContractViolation("find_cutoff called on a certain sample")
    # the kernel re-sorts; feeding sorted values keeps the order trivially stable
    _, cutoff, _ = batch_cutoffs(sorted_.values[None, :], tau)
    return int(cutoff[0])


def shrink(logits, tau: float) -> ShrunkSpace:
    """Convenience: sort, find the cutoff and return the shrunk space."""
    s = sort_logits(logits)
    return space_for(s, find_cutoff(s, tau))


def assemble(weak, strong, space: ShrunkSpace):
    """Gather weak and strong logits at the kept classes.

    Returns ``(shrunk_weak, shrunk_strong, 0)``: the hard target is always
    position 0, the original top-1 class. The weak output is a detached copy.
    """
    w = np.asarray(weak, dtype=np.float64)
    s = np.asarray(strong, dtype=np.float64)
    if w.shape != s.shape or w.ndim != 1:
        raise ShapeError(f"weak {w.shape} and strong {s.shape} must be equal-length vectors")
    if space.kept.max() >= w.shape[0]:
        raise ShapeError("shrunk space refers to classes beyond the logit length")
    return w[space.kept].copy(), s[space.kept], 0
