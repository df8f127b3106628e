#!/usr/bin/env python3
"""Time the fused pairwise transform against the FWHT and report scaling trends.

Absolute numbers depend on the machine; the interesting outputs are the
runtime ratios per doubling of n and for K=8 versus K=4.
"""

import argparse

import numpy as np

from paroquant.engine import (bench_to_csv, bench_transforms, fused_inverse_transform, fwht_rows,
                              random_bench_bundle, set_threads, timing_ratio)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dims", default="256,1024,4096,8192")
    ap.add_argument("--K", type=int, default=8)
    ap.add_argument("--tokens", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--threads", type=int)
    ap.add_argument("--out", default="bench.csv")
    a = ap.parse_args()

    dims = [int(x) for x in a.dims.split(",")]
    rows = bench_transforms(dims, a.K, a.tokens, a.repeats, a.threads)
    with open(a.out, "w") as f:
        f.write(bench_to_csv(rows))
    print(f"threads={set_threads(a.threads)}  wrote {a.out}")
    for r in rows:
        print(f"{r['transform_kind']:9s} n={r['n']:6d}  {r['wall_time'] * 1e3:9.3f} ms  "
              f"{r['elements_per_second'] / 1e6:9.1f} Melem/s")

    gen = np.random.default_rng(0)

    def pairwise(n, K):
        X = gen.standard_normal((a.tokens, n)).astype(np.float32)
        b = random_bench_bundle(n, K, seed=n)
        return lambda: fused_inverse_transform(X, b)

    def hadamard(n):
        X = gen.standard_normal((a.tokens, n)).astype(np.float32)
        s = np.where(gen.random(n) < 0.5, -1, 1).astype(np.float32)
        return lambda: fwht_rows(X, s)

    print("runtime ratio per doubling of n (interleaved timing):")
    for n in dims:
        if 2 * n <= max(dims) * 2 and n & (n - 1) == 0:
            rp = timing_ratio(pairwise(n, a.K), pairwise(2 * n, a.K))
            rh = timing_ratio(hadamard(n), hadamard(2 * n))
            print(f"  {n:6d} -> {2 * n:6d}: pairwise {rp:.2f}  hadamard {rh:.2f}")
    n = 4096
    print(f"K=8 / K=4 at n={n}: {timing_ratio(pairwise(n, 4), pairwise(n, 8)):.2f}")


if __name__ == "__main__":
    main()
