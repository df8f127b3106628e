"""Reference transforms and the transform-comparison harness.

Compares, on one weight matrix, how far each transform can push down the
quantization-induced output error ||X T^-1 Q(T W) - X W||^2 (mean squared):

* ``none``           plain RTN
* ``scaling``        per-channel scaling only
* ``full_rotation``  block-diagonal exp(U - U^T), blocks of ``full_block`` channels
* ``hadamard``       randomized Hadamard, not optimized; mean over sign seeds
* ``independent``    K independent rotations per group, alpha fixed at 1
* ``scaled_pairwise`` independent rotations plus scaling
* ``top_pairs``      dependent Givens sequence over the top magnitude-difference pairs
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .optim import AdamW, mse_loss
from .quantizer import QuantSpec, fake_quant_dynamic, fake_quant_dynamic_backward
from .tensor_store import Rng, group_layout
from .transform import (
    TransformBundle,
    activations_backward,
    apply_bundle_to_weights,
    apply_inverse_to_activations,
    identity_bundle,
    make_bundle,
    weights_backward,
)


class TransformKind(str, enum.Enum):
    NONE = "none"
    SCALING = "scaling"
    FULL_ROTATION = "full_rotation"
    HADAMARD = "hadamard"
    INDEPENDENT = "independent"
    SCALED_PAIRWISE = "scaled_pairwise"
    TOP_PAIRS = "top_pairs"


# ---------------------------------------------------------------------------
# Walsh-Hadamard


def _check_pow2(n: int) -> None:
    if n < 1 or n & (n - 1):
        raise ValueError(f"length must be a power of two, got {n}")


def fwht(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Unnormalized fast Walsh-Hadamard transform along ``axis`` (Sylvester ordering)."""
    x = np.moveaxis(np.array(v, copy=True), axis, -1)
    n = x.shape[-1]
    _check_pow2(n)
    lead = x.shape[:-1]
    h = 1
    while h < n:
        y = x.reshape(*lead, n // (2 * h), 2, h)
        a = y[..., 0, :].copy()
        b = y[..., 1, :]
        y[..., 0, :] = a + b
        y[..., 1, :] = a - b
        x = y.reshape(*lead, n)
        h *= 2
    return np.moveaxis(x, -1, axis)


def hadamard_matrix(n: int) -> np.ndarray:
    _check_pow2(n)
    H = np.ones((1, 1))
    while H.shape[0] < n:
        H = np.block([[H, H], [H, -H]])
    return H


@dataclass
class HadamardOp:
    n: int
    signs: np.ndarray

    @classmethod
    def random(cls, n: int, rng: Rng) -> "HadamardOp":
        _check_pow2(n)
        return cls(n, np.where(rng.numpy().random(n) < 0.5, -1.0, 1.0).astype(np.float32))

    def apply(self, v: np.ndarray, axis: int = -1) -> np.ndarray:
        """(1/sqrt n) H diag(signs) along ``axis``; orthogonal."""
        shape = [1] * v.ndim
        shape[axis] = self.n
        return fwht(v * self.signs.reshape(shape), axis=axis) / np.sqrt(self.n).astype(v.dtype)


# ---------------------------------------------------------------------------
# matrix exponential


def expm(A: np.ndarray, order: int = 18) -> np.ndarray:
    """exp(A) by scaling and squaring with a truncated Taylor series.

    The number of squarings is chosen so that ||A / 2^s||_1 <= 0.5.
    """
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    norm = np.abs(A).sum(axis=0).max() if n else 0.0
    s = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    B = A / 2.0**s
    E = np.eye(n)
    for k in range(order, 0, -1):
        E = np.eye(n) + B @ E / k
    for _ in range(s):
        E = E @ E
    return E


def skew_to_orthogonal(U: np.ndarray) -> np.ndarray:
    """R = exp(U - U^T) from the strictly upper triangle of ``U``."""
    U = np.triu(np.asarray(U, dtype=np.float64), 1)
    return expm(U - U.T)


def expm_frechet(A: np.ndarray, E: np.ndarray) -> np.ndarray:
    """Frechet derivative of exp at ``A`` in direction ``E`` via the 2n block exponential."""
    n = A.shape[0]
    big = np.zeros((2 * n, 2 * n))
    big[:n, :n] = A
    big[n:, n:] = A
    big[:n, n:] = E
    return expm(big)[:n, n:]


def skew_grad(U: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the strict upper triangle of U given dL/dR for R = exp(U - U^T)."""
    U = np.triu(np.asarray(U, np.float64), 1)
    A = U - U.T
    # adjoint of the Frechet derivative: <G, L(A, E)> = <L(A^T, G), E>
    dA = expm_frechet(A.T, np.asarray(dR, np.float64))
    return np.triu(dA - dA.T, 1)


# ---------------------------------------------------------------------------
# pair ranking for the dependent-sequence experiment


def rank_pairs_by_magnitude(W_group: np.ndarray, top_fraction: float | None = None) -> list[tuple[int, int]]:
    """All pairs (i < j) sorted by descending |‖row_i‖ - ‖row_j‖|; ties by (i, j)."""
    norms = np.linalg.norm(np.asarray(W_group, np.float64), axis=1)
    g = len(norms)
    pairs = [(i, j) for i in range(g) for j in range(i + 1, g)]
    pairs.sort(key=lambda p: (-abs(norms[p[0]] - norms[p[1]]), p[0], p[1]))
    if top_fraction is not None:
        pairs = pairs[: int(math.floor(top_fraction * len(pairs)))]
    return pairs


def dependent_bundle(d_in: int, g: int, pairs_per_group: list[list[tuple[int, int]]]) -> TransformBundle:
    """A bundle applying each selected pair as its own rotation, in list order."""
    ng = group_layout(d_in, g).num_groups
    K = max((len(p) for p in pairs_per_group), default=0)
    pairs = np.full((ng, K, 1, 2), -1, np.int32)
    for k, plist in enumerate(pairs_per_group):
        for t, (i, j) in enumerate(plist):
            pairs[k, t, 0] = (i, j)
    return TransformBundle(np.ones(d_in, np.float32), pairs, np.zeros((ng, K, 1), np.float32), g)


# ---------------------------------------------------------------------------
# comparison harness


@dataclass
class CompareConfig:
    bits: int = 4
    group_size: int = 128
    steps: int = 200
    K: int = 8
    N: int = 64
    lr: float = 0.01
    lr_full_rotation: float = 0.001
    full_block: int = 64
    hadamard_seeds: int = 100
    top_fraction: float = 0.1
    seed: int = 0


def _bundle_loss(X, W, Y, bundle, spec, angles, alpha, want_grad=True):
    tw_tape, x_tape = [], []
    TW = apply_bundle_to_weights(W, bundle, angles, alpha, tape=tw_tape)
    XT = apply_inverse_to_activations(X, bundle, angles, alpha, tape=x_tape)
    Wq, qc = fake_quant_dynamic(TW, spec, cache=True)
    loss, dout = mse_loss(XT @ Wq, Y)
    if not want_grad:
        return loss, None, None
    dWq = XT.T @ dout
    dXT = dout @ Wq.T
    dTW = fake_quant_dynamic_backward(dWq, qc)
    _, dang_w, dal_w = weights_backward(dTW, W, bundle, tw_tape, angles, alpha)
    _, dang_x, dal_x = activations_backward(dXT, bundle, x_tape, angles, alpha)
    return loss, dang_w + dang_x, dal_w + dal_x


def _optimize_bundle(X, W, Y, bundle, spec, cfg, train_angles, train_alpha) -> list[float]:
    angles = bundle.angles.copy()
    alpha = bundle.alpha.copy()
    opt = AdamW()
    curve = []
    for step in range(cfg.steps + 1):
        loss, dang, dal = _bundle_loss(X, W, Y, bundle, spec, angles, alpha, want_grad=step < cfg.steps)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        curve.append(loss)
        if step == cfg.steps:
            break
        if train_angles:
            opt.step("angles", angles, dang, cfg.lr)
        if train_alpha:
            opt.step("alpha", alpha, dal, cfg.lr)
            np.maximum(alpha, 1e-4, out=alpha)
    return curve


def _blocks(d: int, size: int) -> list[tuple[int, int]]:
    return [(a, min(a + size, d)) for a in range(0, d, size)]


def _full_rotation_curve(X, W, Y, spec, cfg) -> list[float]:
    blocks = _blocks(W.shape[0], cfg.full_block)
    Us = [np.zeros((b - a, b - a)) for a, b in blocks]
    opt = AdamW()
    curve = []
    for step in range(cfg.steps + 1):
        Rs = [skew_to_orthogonal(U).astype(W.dtype) for U in Us]
        TW = np.concatenate([R @ W[a:b] for R, (a, b) in zip(Rs, blocks)])
        XT = np.concatenate([X[:, a:b] @ R.T for R, (a, b) in zip(Rs, blocks)], axis=1)
        Wq, qc = fake_quant_dynamic(TW, spec, cache=True)
        loss, dout = mse_loss(XT @ Wq, Y)
        curve.append(loss)
        if step == cfg.steps:
            break
        dTW = fake_quant_dynamic_backward(XT.T @ dout, qc)
        dXT = dout @ Wq.T
        for k, (a, b) in enumerate(blocks):
            dR = dTW[a:b] @ W[a:b].T + dXT[:, a:b].T @ X[:, a:b]
            opt.step(f"U{k}", Us[k], skew_grad(Us[k], dR), cfg.lr_full_rotation)
            Us[k] = np.triu(Us[k], 1)
    return curve


def _hadamard_loss(X, W, Y, spec, cfg) -> float:
    d = W.shape[0]
    n = 1 << max(0, (d - 1).bit_length())
    Wp = np.zeros((n, W.shape[1]), W.dtype)
    Wp[:d] = W
    Xp = np.zeros((X.shape[0], n), X.dtype)
    Xp[:, :d] = X
    rng = Rng(cfg.seed + 7919)
    losses = []
    for _ in range(cfg.hadamard_seeds):
        op = HadamardOp.random(n, rng)
        # T = H D / sqrt(n) is orthogonal, so X T^-1 = X D H / sqrt(n)
        TW = op.apply(Wp, axis=0)
        XT = op.apply(Xp, axis=1)
        losses.append(mse_loss(XT @ fake_quant_dynamic(TW, spec), Y)[0])
    return float(np.mean(losses))


def compare_transforms(W, X, cfg: CompareConfig | None = None, kinds=None) -> dict[str, list[float]]:
    """Best-so-far loss curves (steps + 1 points, step 0 = identity init) for each transform kind.

    Optimized kinds keep their best parameters, so each curve is the running
    minimum of the per-step loss and its last point is the final error.
    """
    cfg = cfg or CompareConfig()
    kinds = [TransformKind(k) for k in (kinds or [k for k in TransformKind if k != TransformKind.TOP_PAIRS])]
    W = np.asarray(W, np.float32)
    X = np.asarray(X, np.float32)
    Y = (X.astype(np.float64) @ W).astype(np.float32)
    spec = QuantSpec(cfg.bits, cfg.group_size)
    d = W.shape[0]
    out: dict[str, list[float]] = {}
    for kind in kinds:
        if kind is TransformKind.NONE:
            loss = mse_loss(X @ fake_quant_dynamic(W, spec), Y)[0]
            curve = [loss] * (cfg.steps + 1)
        elif kind is TransformKind.HADAMARD:
            curve = [_hadamard_loss(X, W, Y, spec, cfg)] * (cfg.steps + 1)
        elif kind is TransformKind.FULL_ROTATION:
            curve = _full_rotation_curve(X, W, Y, spec, cfg)
        elif kind is TransformKind.SCALING:
            curve = _optimize_bundle(X, W, Y, identity_bundle(d, cfg.group_size), spec, cfg, False, True)
        elif kind is TransformKind.TOP_PAIRS:
            layout = group_layout(d, cfg.group_size)
            plist = [rank_pairs_by_magnitude(W[a:b], cfg.top_fraction) for a, b in layout]
            curve = _optimize_bundle(X, W, Y, dependent_bundle(d, cfg.group_size, plist), spec, cfg, True, False)
        else:
            bundle = make_bundle(d, cfg.group_size, cfg.K, cfg.N, Rng(cfg.seed))
            curve = _optimize_bundle(
                X, W, Y, bundle, spec, cfg, True, kind is TransformKind.SCALED_PAIRWISE
            )
        out[kind.value] = np.minimum.accumulate(np.asarray(curve, np.float64)).tolist()
    return out


CURVE_FIELDS = ("kind", "step", "loss", "seed")


def curves_to_csv(curves: dict[str, list[float]], seed: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_FIELDS)
    for kind, curve in curves.items():
        for step, loss in enumerate(curve):
            w.writerow([kind, step, repr(float(loss)), seed])
    return buf.getvalue()


def read_curves_csv(text: str) -> dict[str, list[float]]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != CURVE_FIELDS:
        raise ValueError(f"unexpected columns {tuple(rows[0].keys())}")
    out: dict[str, list[float]] = {}
    for r in rows:
        out.setdefault(r["kind"], []).append(float(r["loss"]))
    return out
