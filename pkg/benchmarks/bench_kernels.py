"""Time the compiled loop kernels against their pure-numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Without numba installed (or with SHRINKMATCH_DISABLE_JIT=1) the loop kernels
run as plain Python, which is what the fallback costs.
"""

import argparse
import json
import statistics
import time

import numpy as np

from shrinkmatch import kernels
from shrinkmatch._jit import JIT_ENABLED

SHAPES = [(112, 20), (448, 20), (448, 100), (4096, 100)]


def _time(fn, repeat):
    fn()  # warm-up (and JIT compile)
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return statistics.median(out)


def bench(repeat=20, tau=0.95, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for b, c in SHAPES:
        weak = rng.normal(size=(b, c)) * 2.0
        strong = rng.normal(size=(b, c))
        order, cut, _ = kernels.cutoffs_numpy(weak, tau)
        reps = repeat if (JIT_ENABLED or b * c <= 50_000) else max(2, repeat // 10)
        cases = {
            "cutoffs": (lambda: kernels.cutoffs_loop(weak, tau), lambda: kernels.cutoffs_numpy(weak, tau)),
            "shrunk_ce": (lambda: kernels.shrunk_ce_loop(strong, weak, order, cut, False),
                          lambda: kernels.shrunk_ce_numpy(strong, weak, order, cut, False)),
        }
        for name, (loop, vec) in cases.items():
            t_loop, t_np = _time(loop, reps), _time(vec, reps)
            rows.append({"kernel": name, "B": b, "C": c, "loop_ms": t_loop * 1e3, "numpy_ms": t_np * 1e3,
                         "speedup": t_np / t_loop})
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()
    rows = bench(args.repeat)
    label = "numba" if JIT_ENABLED else "python (no JIT)"
    print(f"loop kernels: {label}")
    print(f"{'kernel':<10} {'B':>5} {'C':>4} {'loop ms':>10} {'numpy ms':>10} {'numpy/loop':>10}")
    for r in rows:
        print(f"{r['kernel']:<10} {r['B']:>5} {r['C']:>4} {r['loop_ms']:>10.3f} {r['numpy_ms']:>10.3f} "
              f"{r['speedup']:>10.2f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"jit": JIT_ENABLED, "rows": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
