#!/usr/bin/env python3
"""Time the numba kernels against the pure-numpy fallback.

Runs each kernel at a few sizes, reports best-of-N wall time per backend,
the speedup, and the largest numeric deviation between the two (they follow
identical algorithms; only libm/BLAS rounding may differ).

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from ctxshare.kernels import _numpy as knp

try:
    from ctxshare.kernels import _numba as knb
except ImportError:
    knb = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_case(name, make_args, call, repeat):
    args = make_args()
    out_np = call(knp, *args)
    row = {"case": name, "numpy_s": best_of(lambda: call(knp, *args), repeat)}
    if knb is not None:
        out_nb = call(knb, *args)  # first call compiles (or loads the cache)
        row["numba_s"] = best_of(lambda: call(knb, *args), repeat)
        row["speedup"] = row["numpy_s"] / row["numba_s"]
        row["max_dev"] = float(np.max(np.abs(out_np - out_nb)))
    return row


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=7, help="timing repetitions (best-of)")
    args = parser.parse_args()
    rng = np.random.default_rng(0)

    def attention_args(n, keys, d):
        q = rng.normal(size=(n, d))
        k = rng.normal(size=(keys, d))
        v = rng.normal(size=(keys, d))
        m = np.where(rng.random((n, keys)) < 0.2, -np.inf, 0.0)
        m[:, 0] = 0.0
        return q, k, v, m, 1.0 / np.sqrt(d)

    cases = [
        ("gaussian_fill 1e6", lambda: (np.uint64(0), 1_000_000), lambda b, s, n: b.gaussian_fill(s, n)),
        ("row_softmax 2048x512", lambda: (rng.normal(scale=5.0, size=(2048, 512)),), lambda b, x: b.row_softmax(x)),
        ("attention 1024x1024x64", lambda: attention_args(1024, 1024, 64), lambda b, *a: b.attention(*a)),
        ("attention 80x112x16 (desk)", lambda: attention_args(80, 112, 16), lambda b, *a: b.attention(*a)),
    ]

    rows = [bench_case(name, make, call, args.repeat) for name, make, call in cases]

    header = f"{'case':<28} {'numpy (s)':>11} {'numba (s)':>11} {'speedup':>8} {'max dev':>10}"
    print(header)
    print("-" * len(header))
    for r in rows:
        if "numba_s" in r:
            print(
                f"{r['case']:<28} {r['numpy_s']:>11.3e} {r['numba_s']:>11.3e}"
                f" {r['speedup']:>8.2f} {r['max_dev']:>10.2e}"
            )
        else:
            print(f"{r['case']:<28} {r['numpy_s']:>11.3e} {'n/a':>11} {'n/a':>8} {'n/a':>10}")
    if knb is None:
        print("\nnumba not importable; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
