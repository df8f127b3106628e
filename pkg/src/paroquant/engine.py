"""Deployed-mode inference and transform microbenchmarks.

The inverse transform runs as one fused pass per (token, channel group) tile:
load the group, divide by alpha, apply all K rotations, store. Tiles are
independent and run in a numba ``prange``; pairs within a rotation touch
disjoint channels. Weights stay as integer codes and are dequantized one group
at a time inside the matmul.
"""

from __future__ import annotations

import csv
import io
import os
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numba
import numpy as np
from numba import njit, prange

# the bundled TBB is too old for numba; workqueue needs no runtime
numba.config.THREADING_LAYER = "workqueue"

from .calibrate import QuantizedLayer, silu
from .quantizer import QuantizedTensor, load_quantized, save_quantized
from .tensor_store import Rng, Tensor, group_layout
from .transform import TransformBundle, bundle_load, bundle_save, make_bundle


def set_threads(n: int | None = None) -> int:
    """Pin the kernel thread count (``PQT_THREADS`` wins when ``n`` is None)."""
    if n is None:
        env = os.environ.get("PQT_THREADS")
        n = int(env) if env else numba.config.NUMBA_NUM_THREADS
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


@njit(parallel=True, cache=True)
def _fused_kernel(X, out, alpha, pairs, cs, sn, g):
    T, D = X.shape
    ng, K, N = cs.shape
    for tile in prange(T * ng):
        tok = tile // ng
        grp = tile % ng
        a0 = grp * g
        live = min(g, D - a0)
        buf = np.empty(g, dtype=X.dtype)
        for c in range(live):
            buf[c] = X[tok, a0 + c] / alpha[a0 + c]
        for t in range(K):
            for n in range(N):
                i = pairs[grp, t, n, 0]
                if i < 0:
                    continue
                j = pairs[grp, t, n, 1]
                c = cs[grp, t, n]
                s = sn[grp, t, n]
                u = buf[i]
                v = buf[j]
                buf[i] = c * u - s * v
                buf[j] = s * u + c * v
        for c in range(live):
            out[tok, a0 + c] = buf[c]


def fused_inverse_transform(X: np.ndarray, bundle: TransformBundle) -> np.ndarray:
    """X T^-1 computed tile by tile; equals ``apply_inverse_to_activations``."""
    X = np.ascontiguousarray(X, dtype=np.float32)
    if X.ndim != 2 or X.shape[1] != bundle.d_in:
        raise ValueError(f"X shape {X.shape} does not match bundle D_in={bundle.d_in}")
    out = np.empty_like(X)
    cs = np.cos(bundle.angles).astype(np.float32)
    sn = np.sin(bundle.angles).astype(np.float32)
    _fused_kernel(X, out, bundle.alpha, bundle.pairs, cs, sn, bundle.group_size)
    return out


@njit(parallel=True, cache=True)
def _fwht_kernel(X, signs):
    T, n = X.shape
    norm = np.float32(1.0 / np.sqrt(n))
    for tok in prange(T):
        row = X[tok]
        for c in range(n):
            row[c] *= signs[c]
        h = 1
        while h < n:
            for start in range(0, n, 2 * h):
                for k in range(start, start + h):
                    a = row[k]
                    b = row[k + h]
                    row[k] = a + b
                    row[k + h] = a - b
            h *= 2
        for c in range(n):
            row[c] *= norm


def fwht_rows(X: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """Randomized normalized Hadamard of every row (compiled butterfly)."""
    out = np.array(X, dtype=np.float32, copy=True)
    _fwht_kernel(out, np.asarray(signs, np.float32))
    return out


# ---------------------------------------------------------------------------
# deployed model


def quantized_matmul(X: np.ndarray, qt: QuantizedTensor, bias=None, hook: Callable[[np.ndarray], None] | None = None):
    """X @ dequant(codes) + bias, dequantizing one group of rows at a time (float64 accumulation)."""
    if X.shape[1] != qt.shape[0]:
        raise ValueError(f"X has {X.shape[1]} columns, weights have {qt.shape[0]} rows")
    acc = np.zeros((X.shape[0], qt.shape[1]), np.float64)
    for k, (a, b) in enumerate(qt.layout):
        block = (qt.codes[a:b].astype(np.float32) - qt.zeros[k]) * qt.scales[k]
        if hook is not None:
            hook(block)
        acc += X[:, a:b].astype(np.float64) @ block.astype(np.float64)
    out = acc.astype(np.float32)
    if bias is not None:
        out = out + bias
    return out


@dataclass
class DeployedLinear:
    qt: QuantizedTensor
    bundle: TransformBundle
    bias: np.ndarray | None

    def forward(self, X, hook=None):
        return quantized_matmul(fused_inverse_transform(X, self.bundle), self.qt, self.bias, hook)


@dataclass
class DeployedLayer:
    up: DeployedLinear
    down: DeployedLinear
    residual: bool = True

    @classmethod
    def freeze(cls, q: QuantizedLayer) -> "DeployedLayer":
        def lin(l):
            return DeployedLinear(l.quantized(), l.bundle.copy(), None if l.bias is None else l.bias.copy())

        return cls(lin(q.up), lin(q.down), q.residual)

    def forward(self, X, hook=None):
        o = self.down.forward(silu(self.up.forward(X, hook)), hook)
        return X + o if self.residual else o


@dataclass
class DeployedModel:
    layers: list[DeployedLayer]

    @property
    def dims(self) -> tuple[int, int]:
        l = self.layers[0]
        return l.up.qt.shape

    @classmethod
    def freeze(cls, qlayers: list[QuantizedLayer]) -> "DeployedModel":
        return cls([DeployedLayer.freeze(q) for q in qlayers])

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for i, layer in enumerate(self.layers):
            for name, lin in (("up", layer.up), ("down", layer.down)):
                extra = [] if lin.bias is None else [Tensor("bias", lin.bias.astype(np.float32), "bias")]
                save_quantized(d / f"layer{i}_{name}.weights.pqt", lin.qt, extra, {"residual": layer.residual})
                bundle_save(d / f"layer{i}_{name}.bundle.pqt", lin.bundle)

    @classmethod
    def load(cls, directory) -> "DeployedModel":
        d = Path(directory)
        layers = []
        i = 0
        while (d / f"layer{i}_up.weights.pqt").exists():
            lins, residual = {}, True
            for name in ("up", "down"):
                qt, tensors, meta = load_quantized(d / f"layer{i}_{name}.weights.pqt")
                bias = tensors["bias"].data if "bias" in tensors else None
                lins[name] = DeployedLinear(qt, bundle_load(d / f"layer{i}_{name}.bundle.pqt"), bias)
                residual = bool(meta.get("residual", True))
            layers.append(DeployedLayer(lins["up"], lins["down"], residual))
            i += 1
        if not layers:
            raise FileNotFoundError(f"no deployed layers in {d}")
        return cls(layers)


def quantized_forward(X: np.ndarray, model: DeployedModel, hook=None) -> np.ndarray:
    X = np.asarray(X, np.float32)
    for layer in model.layers:
        X = layer.forward(X, hook)
    return X


# ---------------------------------------------------------------------------
# benchmark


BENCH_FIELDS = ("transform_kind", "n", "K", "tokens", "wall_time", "elements_per_second")


def random_bench_bundle(n: int, K: int, g: int = 128, N: int = 64, seed: int = 0) -> TransformBundle:
    rng = Rng(seed)
    b = make_bundle(n, g, K, min(N, g // 2), rng)
    gen = rng.numpy()
    b.angles[...] = gen.uniform(-np.pi, np.pi, b.angles.shape).astype(np.float32)
    b.alpha[...] = gen.uniform(0.5, 2.0, b.alpha.shape).astype(np.float32)
    return b


def _median_time(f, repeats: int, min_window: float = 0.02) -> float:
    """Median over ``repeats`` of the mean call time in a window of at least ``min_window`` s."""
    f()  # warm-up / JIT
    t0 = time.perf_counter()
    f()
    first = time.perf_counter() - t0
    inner = max(1, int(min_window / max(first, 1e-7)))
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            f()
        times.append((time.perf_counter() - t0) / inner)
    return statistics.median(times)


def timing_ratio(f_small, f_large, repeats: int = 15, min_window: float = 0.01) -> float:
    """Median of per-repeat time(f_large) / time(f_small), measured back to back.

    Interleaving keeps both sides inside the same window of machine load, which
    makes the ratio far steadier than a ratio of separately measured medians.
    """
    for f in (f_small, f_large):
        f()
    inner = []
    for f in (f_small, f_large):
        t0 = time.perf_counter()
        f()
        inner.append(max(1, int(min_window / max(time.perf_counter() - t0, 1e-7))))
    ratios = []
    for _ in range(repeats):
        t = []
        for f, k in zip((f_small, f_large), inner):
            t0 = time.perf_counter()
            for _ in range(k):
                f()
            t.append((time.perf_counter() - t0) / k)
        ratios.append(t[1] / t[0])
    return statistics.median(ratios)


def bench_transforms(dims, K: int = 8, tokens: int = 64, repeats: int = 5, threads: int | None = None,
                     group_size: int = 128, seed: int = 0) -> list[dict]:
    """Median wall time of the fused pairwise transform and the FWHT on the same activations."""
    set_threads(threads)
    rows = []
    gen = Rng(seed).numpy()
    for n in dims:
        X = gen.standard_normal((tokens, n)).astype(np.float32)
        bundle = random_bench_bundle(n, K, group_size, seed=seed)
        t = _median_time(lambda: fused_inverse_transform(X, bundle), repeats)
        rows.append(_row("pairwise", n, K, tokens, t))
        if n & (n - 1) == 0:
            signs = np.where(gen.random(n) < 0.5, -1.0, 1.0).astype(np.float32)
            t = _median_time(lambda: fwht_rows(X, signs), repeats)
            rows.append(_row("hadamard", n, 0, tokens, t))
    return rows


def _row(kind, n, K, tokens, t):
    t = max(t, 1e-9)
    return {"transform_kind": kind, "n": n, "K": K, "tokens": tokens, "wall_time": t,
            "elements_per_second": tokens * n / t}


def bench_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, BENCH_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def read_bench_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != BENCH_FIELDS:
        raise ValueError(f"unexpected columns {tuple(rows[0].keys())}")
    return [
        {"transform_kind": r["transform_kind"], "n": int(r["n"]), "K": int(r["K"]), "tokens": int(r["tokens"]),
         "wall_time": float(r["wall_time"]), "elements_per_second": float(r["elements_per_second"])}
        for r in rows
    ]
