"""Brute-force property checks run by ``shrinkmatch oracle-check``.

Every check draws its instances from ``default_rng([seed, check_id])``, so a
failure report (check name, seed, instance index) is enough to reproduce it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import shrink as _shrink
from .nn import init_params, softmax
from .state import EmaTracker
from .trainer import RunConfig, composite_loss

CUTOFF_CLASSES = (4, 20, 100)
CUTOFF_TAUS = (0.7, 0.8, 0.9, 0.95, 0.98)


@dataclass
class CheckResult:
    name: str
    passed: bool
    instances: int
    seconds: float = 0.0
    failure: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"{status} {self.name}: {self.instances} instances in {self.seconds:.2f}s"
        if not self.passed:
            text += " | " + ", ".join(f"{k}={v}" for k, v in self.failure.items())
        return text


def scan_cutoff(sorted_values: np.ndarray, tau: float) -> int:
    """Try every K in [2, C+1] on the re-assembled logits; return the first certain one."""
    s = np.asarray(sorted_values, dtype=np.float64)
    for k in range(2, s.size + 2):
        kept = np.concatenate([s[:1], s[k - 1:]])
        e = np.exp(kept - kept[0])
        if e[0] / e.sum() >= tau:
            return k
    raise AssertionError("singleton space is always certain")


def cutoff_instances(seed: int, n: int):
    """``n`` uncertain instances ``(index, logits, tau)`` spread over C and tau."""
    rng = np.random.default_rng([seed, 1])
    i = 0
    while i < n:
        c = CUTOFF_CLASSES[i % len(CUTOFF_CLASSES)]
        tau = CUTOFF_TAUS[(i // len(CUTOFF_CLASSES)) % len(CUTOFF_TAUS)]
        z = rng.normal(size=c) * rng.uniform(0.1, 5.0)
        if softmax(z).max() >= tau:
            continue  # already certain: outside the cutoff search's domain
        yield i, z, tau
        i += 1


def check_find_cutoff(seed: int = 0, n: int = 10_000) -> CheckResult:
    t0 = time.perf_counter()
    count = 0
    for i, z, tau in cutoff_instances(seed, n):
        s = _shrink.sort_logits(z)
        k = _shrink.find_cutoff(s, tau)
        expected = scan_cutoff(s.values, tau)
        conf_k = _shrink.shrunk_confidence(s, k) if 2 <= k <= z.size + 1 else float("nan")
        conf_prev = _shrink.shrunk_confidence(s, k - 1) if 2 <= k - 1 <= z.size + 1 else float("nan")
        if k != expected or not conf_k >= tau or not conf_prev < tau:
            return CheckResult("find_cutoff", False, count, time.perf_counter() - t0,
                               {"seed": seed, "instance": i, "C": z.size, "tau": tau, "got": k,
                                "expected": expected})
        count += 1
    return CheckResult("find_cutoff", True, count, time.perf_counter() - t0)


def check_monotonic(seed: int = 0, n: int = 1000) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, 2])
    for i in range(n):
        c = int(rng.integers(2, 60))
        s = _shrink.sort_logits(rng.normal(size=c) * rng.uniform(0.1, 5.0))
        vals = [_shrink.shrunk_confidence(s, k) for k in range(2, c + 2)]
        bad = [k for k, (a, b) in enumerate(zip(vals, vals[1:]), start=2) if not b > a]
        if bad:
            return CheckResult("shrunk_confidence_monotonic", False, i, time.perf_counter() - t0,
                               {"seed": seed, "instance": i, "C": c, "K": bad[0]})
    return CheckResult("shrunk_confidence_monotonic", True, n, time.perf_counter() - t0)


def gradient_instance(rng, n_classes=4, in_dim=5, hidden=6, aux_hidden=5, margin=1e-3):
    """Random toy network, batch and weak logits with every ReLU at least ``margin``
    away from its kink (central differences are meaningless across a kink)."""
    from .nn import forward_with_cache

    while True:
        params = init_params(in_dim, n_classes, hidden=hidden, n_backbone=2, aux_hidden=aux_hidden, rng=rng)
        for k in params.names():
            if k.endswith(".b"):
                params.values[k] = rng.normal(size=params[k].shape) * 0.5
        xl = rng.normal(size=(3, in_dim))
        us = rng.normal(size=(6, in_dim))
        _, cache = forward_with_cache(params, np.concatenate([xl, us]))
        if min(float(np.abs(p).min()) for p in cache.pre + cache.aux_pre) > margin:
            break
    yl = rng.integers(0, n_classes, size=3)
    weak = rng.normal(size=(6, n_classes)) * rng.uniform(0.5, 1.5, size=(6, 1))
    weak[:2, 0] += 8.0  # at least two certain rows
    cfg = RunConfig(tau=float(rng.choice([0.7, 0.8, 0.9])), lambda_u=float(rng.uniform(0.2, 1.5)),
                    u_label_mode=str(rng.choice(["hard", "soft"])),
                    s_label_mode=str(rng.choice(["hard", "soft"])),
                    principle1=bool(rng.integers(2)), aux_head=bool(rng.random() < 0.75))
    gate = float(rng.uniform(0.1, 1.0))
    return params, cfg, xl, yl, us, weak, gate


def finite_difference_error(params, cfg, xl, yl, us, weak, gate, h=1e-5) -> tuple[float, str]:
    _, grads = composite_loss(params, cfg, xl, yl, us, weak, weak, gate)
    worst, where = 0.0, ""
    for name in params:
        p = params.copy()
        arr = p.values[name] = params[name].copy()
        flat = arr.reshape(-1)
        fd = np.zeros(flat.size)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = composite_loss(p, cfg, xl, yl, us, weak, weak, gate)[0]["total"]
            flat[j] = old - h
            down = composite_loss(p, cfg, xl, yl, us, weak, weak, gate)[0]["total"]
            flat[j] = old
            fd[j] = (up - down) / (2 * h)
        g = grads[name].reshape(-1)
        err = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6)
        if err.size and err.max() > worst:
            worst, where = float(err.max()), name
    return worst, where


def check_gradients(seed: int = 0, n: int = 100, tol: float = 1e-4) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, 3])
    for i in range(n):
        err, where = finite_difference_error(*gradient_instance(rng))
        if not err < tol:
            return CheckResult("composite_gradient", False, i, time.perf_counter() - t0,
                               {"seed": seed, "instance": i, "param": where, "rel_error": f"{err:.3g}"})
    return CheckResult("composite_gradient", True, n, time.perf_counter() - t0)


def check_ema(seed: int = 0, steps=(1, 10, 1000), tol: float = 1e-9) -> CheckResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, 4])
    cases = [(0.999, 1.0)] + [(float(rng.uniform(0.5, 0.9999)), float(rng.uniform(0, 1))) for _ in range(10)]
    for i, (gamma, m) in enumerate(cases):
        for t in steps:
            tr = EmaTracker(gamma)
            for _ in range(t):
                tr.update(m)
            if abs(tr.value - (1 - gamma ** t) * m) > tol:
                return CheckResult("ema_closed_form", False, i, time.perf_counter() - t0,
                                   {"seed": seed, "instance": i, "gamma": gamma, "m": m, "t": t})
    return CheckResult("ema_closed_form", True, len(cases) * len(steps), time.perf_counter() - t0)


def check_kernel_twins(seed: int = 0, n: int = 20) -> CheckResult:
    """Compiled and pure-numpy kernels agree (exact cutoffs, losses to 1e-12)."""
    t0 = time.perf_counter()
    rng = np.random.default_rng([seed, 5])
    for i in range(n):
        c = int(rng.choice(CUTOFF_CLASSES))
        z = rng.normal(size=(64, c)) * rng.uniform(0.1, 5.0, size=(64, 1))
        tau = float(rng.choice(CUTOFF_TAUS))
        o1, k1, _ = kernels.cutoffs_loop(z, tau)
        o2, k2, _ = kernels.cutoffs_numpy(z, tau)
        strong = rng.normal(size=z.shape)
        l1, g1 = kernels.shrunk_ce_loop(strong, z, o1, k1, False)
        l2, g2 = kernels.shrunk_ce_numpy(strong, z, o1, k1, False)
        ok = (np.array_equal(o1, o2) and np.array_equal(k1, k2) and np.allclose(l1, l2, rtol=1e-12, atol=1e-14)
              and np.allclose(g1, g2, rtol=1e-12, atol=1e-14))
        if not ok:
            return CheckResult("kernel_twins", False, i, time.perf_counter() - t0,
                               {"seed": seed, "instance": i, "C": c, "tau": tau})
    return CheckResult("kernel_twins", True, n, time.perf_counter() - t0)


CHECKS = {
    "find_cutoff": check_find_cutoff,
    "shrunk_confidence_monotonic": check_monotonic,
    "composite_gradient": check_gradients,
    "ema_closed_form": check_ema,
    "kernel_twins": check_kernel_twins,
}


def run_all(seed: int = 0, quick: bool = False, only=None) -> list[CheckResult]:
    sizes = {"find_cutoff": 1000, "shrunk_confidence_monotonic": 200, "composite_gradient": 10} if quick else {}
    out = []
    for name, fn in CHECKS.items():
        if only and name not in only:
            continue
        kwargs = {"n": sizes[name]} if name in sizes else {}
        out.append(fn(seed, **kwargs))
    return out
