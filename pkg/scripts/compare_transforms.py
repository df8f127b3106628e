#!/usr/bin/env python3
"""Optimize every transform kind on one outlier-heavy weight and write loss curves.

Writes ``curves.csv`` (kind, step, loss, seed) and prints the final error per kind.
Pass ``--plot`` to also save ``curves.png`` when matplotlib is available.
"""

import argparse
from pathlib import Path

import numpy as np

from paroquant.baselines import CompareConfig, TransformKind, compare_transforms, curves_to_csv
from paroquant.calibrate import outlier_matrix
from paroquant.tensor_store import Rng


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--d-in", type=int, default=128)
    ap.add_argument("--d-out", type=int, default=512)
    ap.add_argument("--rows", type=int, default=128, help="calibration rows")
    ap.add_argument("--outliers", type=int, default=4)
    ap.add_argument("--gain", type=float, default=50.0)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--seeds", type=int, default=1, help="repeat over this many data seeds")
    ap.add_argument("--top-pairs", action="store_true", help="include the dependent top-10%% pairs arm")
    ap.add_argument("--out", default="compare_out")
    ap.add_argument("--plot", action="store_true")
    a = ap.parse_args()

    kinds = [k for k in TransformKind if a.top_pairs or k != TransformKind.TOP_PAIRS]
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_parts, finals = [], {}
    for seed in range(a.seeds):
        gen = Rng(seed).numpy()
        W = outlier_matrix(a.d_in, a.d_out, a.outliers, a.gain, gen)
        X = gen.standard_normal((a.rows, a.d_in)).astype(np.float32)
        curves = compare_transforms(W, X, CompareConfig(steps=a.steps, seed=seed), kinds)
        text = curves_to_csv(curves, seed)
        csv_parts.append(text if seed == 0 else text.split("\n", 1)[1])
        for k, c in curves.items():
            finals.setdefault(k, []).append(c[-1])
    (out / "curves.csv").write_text("".join(csv_parts))
    for k, v in finals.items():
        print(f"{k:16s} final error {np.mean(v):.5g}" + (f" (+- {np.std(v):.2g})" if len(v) > 1 else ""))

    if a.plot:
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 4))
        for k, c in curves.items():
            ax.plot(c, label=k)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("output MSE")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "curves.png", dpi=120)
    print(f"wrote {out / 'curves.csv'}")


if __name__ == "__main__":
    main()
