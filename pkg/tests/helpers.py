"""Independent oracles shared by the test modules."""

import numpy as np


def central_diff(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` at array ``x`` (perturbed in place, restored)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def max_rel_error(a, b, floor=1e-6):
    """max |a - b| / max(|a|, |b|, floor), elementwise."""
    a, b = np.asarray(a), np.asarray(b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def scan_cutoff(logits, tau):
    """Exhaustive oracle: smallest K in [2, C+1] whose re-assembled softmax top-1 reaches tau."""
    z = np.asarray(logits, dtype=np.float64)
    order = sorted(range(len(z)), key=lambda i: (-z[i], i))
    s = z[order]
    for k in range(2, len(z) + 2):
        kept = np.concatenate([s[:1], s[k - 1:]])
        p = np.exp(kept - kept.max())
        if p[0] / p.sum() >= tau:
            return k
    raise AssertionError("unreachable: singleton space always certain")


def randomize_biases(params, rng, scale=0.5):
    for k in params.names():
        if k.endswith(".b"):
            params.values[k] = rng.normal(size=params[k].shape) * scale
    return params


def min_abs_preactivation(params, x):
    """Smallest |pre-activation| over every ReLU in the network (kink distance)."""
    from shrinkmatch.nn import forward_with_cache

    _, cache = forward_with_cache(params, x)
    pres = cache.pre + cache.aux_pre
    return min(float(np.abs(p).min()) for p in pres)
