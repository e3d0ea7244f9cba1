"""Batched shrink kernels.

Every kernel exists twice: an explicit per-row loop compiled with numba and a
vectorised numpy version. ``batch_cutoffs`` / ``batch_shrunk_ce`` dispatch on
``JIT_ENABLED`` (see ``_jit``). Both paths return identical cutoffs; losses
agree to rounding.

Conventions: ``order[r]`` lists class indices by descending logit (ties to the
lower index), position ``p`` in that order holds class ``n_{p+1}``. A cutoff
``K`` keeps positions ``0`` and ``K-1 .. C-1``.
"""

import numpy as np

from ._jit import JIT_ENABLED, njit


@njit(cache=True)
def cutoffs_loop(logits, tau):
    n, c = logits.shape
    order = np.empty((n, c), dtype=np.int64)
    cutoff = np.empty(n, dtype=np.int64)
    full_conf = np.empty(n, dtype=np.float64)
    tail = np.empty(c + 1, dtype=np.float64)
    for r in range(n):
        row = logits[r]
        o = np.argsort(-row, kind="mergesort")
        top = row[o[0]]
        # tail[j] = sum_{p >= j} exp(s_p - s_1), accumulated from the end
        tail[c] = 0.0
        for p in range(c - 1, 0, -1):
            tail[p] = tail[p + 1] + np.exp(row[o[p]] - top)
        full_conf[r] = 1.0 / (1.0 + tail[1])
        lo = 3
        hi = c + 1
        while lo < hi:
            mid = (lo + hi) // 2
            if 1.0 / (1.0 + tail[mid - 1]) >= tau:
                hi = mid
            else:
                lo = mid + 1
        for p in range(c):
            order[r, p] = o[p]
        cutoff[r] = lo
    return order, cutoff, full_conf


def cutoffs_numpy(logits, tau):
    logits = np.asarray(logits, dtype=np.float64)
    n, c = logits.shape
    order = np.argsort(-logits, axis=1, kind="stable")
    s = np.take_along_axis(logits, order, axis=1)
    e = np.exp(s[:, 1:] - s[:, :1])
    tail = np.zeros((n, c + 1))
    # sequential reversed cumsum: same accumulation order as the loop kernel
    tail[:, 1:c] = np.cumsum(e[:, ::-1], axis=1)[:, ::-1]
    conf = 1.0 / (1.0 + tail)  # conf[:, j] = confidence when keeping positions 0 and >= j
    full_conf = conf[:, 1]
    ok = conf[:, 2:] >= tau  # candidate K = 3 .. C+1  <->  column j = K-1 = 2 .. C
    # ok is monotone along each row and always true at K = C+1
    cutoff = 3 + np.argmax(ok, axis=1)
    return order, cutoff.astype(np.int64), full_conf


@njit(cache=True)
def shrunk_ce_loop(strong, weak, order, cutoff, soft):
    n, c = strong.shape
    loss = np.zeros(n, dtype=np.float64)
    grad = np.zeros((n, c), dtype=np.float64)
    for r in range(n):
        k = cutoff[r]
        m = c - k + 2
        kept = np.empty(m, dtype=np.int64)
        kept[0] = order[r, 0]
        for i in range(1, m):
            kept[i] = order[r, k - 2 + i]
        zs = np.empty(m)
        for i in range(m):
            zs[i] = strong[r, kept[i]]
        mx = zs.max()
        tot = 0.0
        for i in range(m):
            zs[i] = np.exp(zs[i] - mx)
            tot += zs[i]
        lse = mx + np.log(tot)
        if soft:
            zw = np.empty(m)
            for i in range(m):
                zw[i] = weak[r, kept[i]]
            mw = zw.max()
            tw = 0.0
            for i in range(m):
                zw[i] = np.exp(zw[i] - mw)
                tw += zw[i]
            val = 0.0
            for i in range(m):
                t = zw[i] / tw
                val += t * (lse - strong[r, kept[i]])
                grad[r, kept[i]] = zs[i] / tot - t
            loss[r] = val
        else:
            loss[r] = lse - strong[r, kept[0]]
            for i in range(m):
                grad[r, kept[i]] = zs[i] / tot
            grad[r, kept[0]] -= 1.0
    return loss, grad


def kept_mask(order, cutoff):
    """Boolean (n, C) mask in class space of the classes retained by each cutoff."""
    n, c = order.shape
    pos = np.arange(c)[None, :]
    keep_sorted = (pos == 0) | (pos >= (cutoff[:, None] - 1))
    mask = np.zeros((n, c), dtype=bool)
    np.put_along_axis(mask, order, keep_sorted, axis=1)
    return mask


def _masked_softmax(z, mask):
    zm = np.where(mask, z, -np.inf)
    zm = zm - zm.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(zm), 0.0)
    tot = e.sum(axis=1, keepdims=True)
    return e / tot, zm - np.log(tot)


def shrunk_ce_numpy(strong, weak, order, cutoff, soft):
    strong = np.asarray(strong, dtype=np.float64)
    n = strong.shape[0]
    mask = kept_mask(order, cutoff)
    p, logp = _masked_softmax(strong, mask)
    rows = np.arange(n)
    if soft:
        t, _ = _masked_softmax(np.asarray(weak, dtype=np.float64), mask)
        loss = -(t * np.where(mask, logp, 0.0)).sum(axis=1)
        grad = p - t
    else:
        top = order[:, 0]
        loss = -logp[rows, top]
        grad = p.copy()
        grad[rows, top] -= 1.0
    return loss, grad


def batch_cutoffs(logits, tau):
    """Sort each row and find the minimal cutoff K in [3, C+1] with shrunk confidence >= tau.

    Returns ``(order, cutoff, full_confidence)``. The cutoff is meaningful only
    for rows whose full-space confidence is below ``tau``.
    """
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    if JIT_ENABLED:
        return cutoffs_loop(logits, float(tau))
    return cutoffs_numpy(logits, float(tau))


def batch_shrunk_ce(strong, weak, order, cutoff, soft=False):
    """Per-row CE in each row's shrunk space, target = the weak top-1 class.

    ``soft=True`` uses the weak softmax restricted to the shrunk space as the
    target instead. Returns per-row losses and gradients w.r.t. ``strong``
    (zero outside the kept classes).
    """
    strong = np.ascontiguousarray(strong, dtype=np.float64)
    weak = np.ascontiguousarray(weak, dtype=np.float64)
    order = np.ascontiguousarray(order, dtype=np.int64)
    cutoff = np.ascontiguousarray(cutoff, dtype=np.int64)
    if JIT_ENABLED:
        return shrunk_ce_loop(strong, weak, order, cutoff, bool(soft))
    return shrunk_ce_numpy(strong, weak, order, cutoff, bool(soft))
