"""Scaled pairwise rotation: channel scaling followed by K independent Givens rotations per group.

Weights (D_in, D_out) are transformed on their rows::

    T(W) = R_K ... R_2 R_1 diag(alpha) W

i.e. scaling first, then rotation t = 1..K in order. Activations (T, D_in)
receive the inverse on their columns::

    X T^-1 = X diag(1/alpha) R_1^T R_2^T ... R_K^T

so that (X T^-1)(T W) == X W. Right-multiplying by R^T updates a column pair
with the same formula a row pair gets under R, which is what ``rotate_cols``
does.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .tensor_store import FormatError, GroupLayout, Rng, Tensor, group_layout, load_tensors, save_tensors


@dataclass(frozen=True)
class Pair:
    i: int
    j: int


@dataclass
class IndependentRotation:
    pairs: list[Pair]
    angles: np.ndarray

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=np.float32)
        if len(self.pairs) != len(self.angles):
            raise ValueError("one angle per pair required")
        seen: set[int] = set()
        for p in self.pairs:
            if not 0 <= p.i < p.j:
                raise ValueError(f"pair {p} must satisfy 0 <= i < j")
            if p.i in seen or p.j in seen:
                raise ValueError(f"channel reused within an independent rotation: {p}")
            seen.update((p.i, p.j))


def select_pairs(g: int, K: int, N: int, rng: Rng) -> list[list[Pair]]:
    """Pick K lists of disjoint channel pairs for a group of ``g`` channels.

    All g(g-1)/2 pairs are shuffled once. Each rotation then walks the shuffled
    list and greedily keeps a pair if neither channel is already used in this
    rotation and the pair was not taken by an earlier rotation, stopping at N.
    Later rotations may come up short.
    """
    if g < 2 or K < 1 or not 1 <= N <= g // 2:
        raise ValueError(f"invalid pair selection sizes g={g} K={K} N={N}")
    shuffled = rng.shuffle([(i, j) for i in range(g) for j in range(i + 1, g)])
    taken: set[tuple[int, int]] = set()
    out = []
    for _ in range(K):
        used = bytearray(g)
        sel = []
        for i, j in shuffled:
            if len(sel) == N:
                break
            if used[i] or used[j] or (i, j) in taken:
                continue
            sel.append(Pair(i, j))
            used[i] = used[j] = 1
            taken.add((i, j))
        out.append(sel)
    return out


def apply_givens_rows(m: np.ndarray, i: int, j: int, theta: float) -> None:
    """In-place Givens rotation of rows i and j of ``m``."""
    c, s = np.cos(theta), np.sin(theta)
    a = m[i].copy()
    b = m[j].copy()
    m[i] = c * a - s * b
    m[j] = s * a + c * b


# ---------------------------------------------------------------------------
# vectorized pair updates (all groups of one rotation at once)


def rotate_rows(W: np.ndarray, I: np.ndarray, J: np.ndarray, theta: np.ndarray) -> np.ndarray:
    out = W.copy()
    c = np.cos(theta).astype(W.dtype)[:, None]
    s = np.sin(theta).astype(W.dtype)[:, None]
    a, b = W[I], W[J]
    out[I] = c * a - s * b
    out[J] = s * a + c * b
    return out


def rotate_cols(X: np.ndarray, I: np.ndarray, J: np.ndarray, theta: np.ndarray) -> np.ndarray:
    out = X.copy()
    c = np.cos(theta).astype(X.dtype)
    s = np.sin(theta).astype(X.dtype)
    a, b = X[:, I], X[:, J]
    out[:, I] = c * a - s * b
    out[:, J] = s * a + c * b
    return out


def rotate_rows_backward(d_out, out, I, J, theta):
    """Gradients (d_in, d_theta) for ``out = rotate_rows(in, I, J, theta)``."""
    c = np.cos(theta).astype(d_out.dtype)[:, None]
    s = np.sin(theta).astype(d_out.dtype)[:, None]
    di, dj = d_out[I], d_out[J]
    d_theta = np.sum(dj * out[I] - di * out[J], axis=1, dtype=np.float64)
    d_in = d_out.copy()
    d_in[I] = c * di + s * dj
    d_in[J] = -s * di + c * dj
    return d_in, d_theta


def rotate_cols_backward(d_out, out, I, J, theta):
    c = np.cos(theta).astype(d_out.dtype)
    s = np.sin(theta).astype(d_out.dtype)
    di, dj = d_out[:, I], d_out[:, J]
    d_theta = np.sum(dj * out[:, I] - di * out[:, J], axis=0, dtype=np.float64)
    d_in = d_out.copy()
    d_in[:, I] = c * di + s * dj
    d_in[:, J] = -s * di + c * dj
    return d_in, d_theta


# ---------------------------------------------------------------------------
# bundle


@dataclass
class TransformBundle:
    """Per-channel scales plus, per channel group, K independent rotations.

    ``pairs`` is int32 (num_groups, K, N, 2) with group-local channel indices and
    -1 marking unused slots; ``angles`` is float32 (num_groups, K, N).
    """

    alpha: np.ndarray
    pairs: np.ndarray
    angles: np.ndarray
    group_size: int

    def __post_init__(self):
        # float64 parameters are kept as-is (gradient checks); everything else is float32
        self.alpha = _params(self.alpha)
        self.pairs = np.ascontiguousarray(self.pairs, dtype=np.int32)
        self.angles = _params(self.angles)
        validate_bundle(self)

    @property
    def d_in(self) -> int:
        return self.alpha.shape[0]

    @property
    def K(self) -> int:
        return self.pairs.shape[1]

    @property
    def N(self) -> int:
        return self.pairs.shape[2]

    @property
    def layout(self) -> GroupLayout:
        return group_layout(self.d_in, self.group_size)

    @cached_property
    def _index(self):
        # per rotation: global I, J and a boolean mask over (num_groups, N)
        offs = (np.arange(self.layout.num_groups) * self.group_size)[:, None]
        idx = []
        for t in range(self.K):
            p = self.pairs[:, t]
            mask = p[..., 0] >= 0
            I = (p[..., 0] + offs)[mask].astype(np.int64)
            J = (p[..., 1] + offs)[mask].astype(np.int64)
            idx.append((I, J, mask))
        return idx

    def rotation_index(self, t: int):
        return self._index[t]

    def angle_vector(self, t: int, angles: np.ndarray | None = None) -> np.ndarray:
        a = self.angles if angles is None else angles
        return a[:, t][self._index[t][2]]

    def rotation(self, group: int, t: int) -> IndependentRotation:
        p = self.pairs[group, t]
        live = p[:, 0] >= 0
        return IndependentRotation([Pair(int(i), int(j)) for i, j in p[live]], self.angles[group, t][live])

    def num_pairs(self) -> int:
        return int((self.pairs[..., 0] >= 0).sum())

    def copy(self) -> "TransformBundle":
        return TransformBundle(self.alpha.copy(), self.pairs.copy(), self.angles.copy(), self.group_size)


def _params(a) -> np.ndarray:
    a = np.asarray(a)
    return np.ascontiguousarray(a, dtype=np.float64 if a.dtype == np.float64 else np.float32)


def identity_bundle(d_in: int, g: int, K: int = 0, N: int = 1) -> TransformBundle:
    ng = group_layout(d_in, g).num_groups
    return TransformBundle(
        np.ones(d_in, np.float32),
        np.full((ng, K, N, 2), -1, np.int32),
        np.zeros((ng, K, N), np.float32),
        g,
    )


def make_bundle(d_in: int, g: int, K: int, N: int, rng: Rng) -> TransformBundle:
    """Identity-initialised bundle (alpha = 1, theta = 0) with pairs from ``select_pairs``.

    A short last group selects among its live channels only.
    """
    layout = group_layout(d_in, g)
    pairs = np.full((layout.num_groups, K, N, 2), -1, np.int32)
    for k in range(layout.num_groups):
        live = layout.live(k)
        if live < 2:
            continue
        for t, sel in enumerate(select_pairs(live, K, min(N, live // 2), rng)):
            for n, p in enumerate(sel):
                pairs[k, t, n] = (p.i, p.j)
    return TransformBundle(np.ones(d_in, np.float32), pairs, np.zeros(pairs.shape[:3], np.float32), g)


def validate_bundle(b: TransformBundle) -> None:
    if b.alpha.ndim != 1:
        raise FormatError("alpha must be a vector")
    layout = group_layout(b.alpha.shape[0], b.group_size)
    if b.pairs.ndim != 4 or b.pairs.shape[0] != layout.num_groups or b.pairs.shape[3] != 2:
        raise FormatError(f"pairs shape {b.pairs.shape} inconsistent with {layout.num_groups} groups")
    if b.angles.shape != b.pairs.shape[:3]:
        raise FormatError("angles shape does not match pairs")
    if not (np.all(np.isfinite(b.alpha)) and np.all(b.alpha > 0)):
        raise FormatError("alpha must be finite and positive")
    if not np.all(np.isfinite(b.angles)):
        raise FormatError("angles must be finite")
    for k in range(layout.num_groups):
        live = layout.live(k)
        seen_pairs: set[tuple[int, int]] = set()
        for t in range(b.pairs.shape[1]):
            used: set[int] = set()
            for i, j in b.pairs[k, t]:
                i, j = int(i), int(j)
                if i == -1 and j == -1:
                    continue
                if not 0 <= i < j < live:
                    raise FormatError(f"group {k} rotation {t}: invalid pair ({i}, {j})")
                if i in used or j in used:
                    raise FormatError(f"group {k} rotation {t}: channel reused in ({i}, {j})")
                if (i, j) in seen_pairs:
                    raise FormatError(f"group {k}: pair ({i}, {j}) repeated across rotations")
                used.update((i, j))
                seen_pairs.add((i, j))


# ---------------------------------------------------------------------------
# application


def apply_bundle_to_weights(W: np.ndarray, bundle: TransformBundle, angles=None, alpha=None, tape: list | None = None):
    """Return T(W). ``tape`` (if a list) receives the output of each rotation for backprop."""
    alpha = bundle.alpha if alpha is None else alpha
    if W.shape[0] != bundle.d_in:
        raise ValueError(f"W has {W.shape[0]} input channels, bundle expects {bundle.d_in}")
    out = alpha.astype(W.dtype)[:, None] * W
    for t in range(bundle.K):
        I, J, _ = bundle.rotation_index(t)
        out = rotate_rows(out, I, J, bundle.angle_vector(t, angles))
        if tape is not None:
            tape.append(out)
    return out


def apply_inverse_to_activations(X: np.ndarray, bundle: TransformBundle, angles=None, alpha=None, tape: list | None = None):
    """Return X T^-1 (scaling by 1/alpha, then rotations t = 1..K on column pairs)."""
    alpha = bundle.alpha if alpha is None else alpha
    if X.shape[1] != bundle.d_in:
        raise ValueError(f"X has {X.shape[1]} columns, bundle expects {bundle.d_in}")
    out = X / alpha.astype(X.dtype)
    if tape is not None:
        tape.append(out)
    for t in range(bundle.K):
        I, J, _ = bundle.rotation_index(t)
        out = rotate_cols(out, I, J, bundle.angle_vector(t, angles))
        if tape is not None:
            tape.append(out)
    return out


def weights_backward(dTW, W, bundle: TransformBundle, tape: list, angles=None, alpha=None):
    """Gradients (dW, dangles, dalpha) of ``apply_bundle_to_weights`` given its tape."""
    alpha = bundle.alpha if alpha is None else alpha
    dangles = np.zeros(bundle.angles.shape, np.float64)
    d = dTW
    for t in range(bundle.K - 1, -1, -1):
        I, J, mask = bundle.rotation_index(t)
        d, dth = rotate_rows_backward(d, tape[t], I, J, bundle.angle_vector(t, angles))
        dangles[:, t][mask] = dth
    dalpha = np.sum(d * W, axis=1, dtype=np.float64)
    dW = alpha.astype(d.dtype)[:, None] * d
    return dW, dangles, dalpha


def activations_backward(dXT, bundle: TransformBundle, tape: list, angles=None, alpha=None):
    """Gradients (dX, dangles, dalpha) of ``apply_inverse_to_activations`` given its tape."""
    alpha = bundle.alpha if alpha is None else alpha
    dangles = np.zeros(bundle.angles.shape, np.float64)
    d = dXT
    for t in range(bundle.K - 1, -1, -1):
        I, J, mask = bundle.rotation_index(t)
        d, dth = rotate_cols_backward(d, tape[t + 1], I, J, bundle.angle_vector(t, angles))
        dangles[:, t][mask] = dth
    scaled = tape[0]  # X / alpha
    a = alpha.astype(d.dtype)
    dalpha = -np.sum(d * scaled, axis=0, dtype=np.float64) / alpha
    return d / a, dangles, dalpha


def materialize(bundle: TransformBundle, group: int) -> np.ndarray:
    """Dense (R_K ... R_1) diag(alpha_group) for one group, in float64."""
    a, b = bundle.layout.bounds(group)
    m = np.diag(bundle.alpha[a:b].astype(np.float64))
    for t in range(bundle.K):
        rot = bundle.rotation(group, t)
        for p, th in zip(rot.pairs, rot.angles):
            apply_givens_rows(m, p.i, p.j, float(th))
    return m


# ---------------------------------------------------------------------------
# serialization


def bundle_save(path, bundle: TransformBundle) -> None:
    layout = bundle.layout
    save_tensors(
        path,
        [
            Tensor("alpha", bundle.alpha.astype(np.float32), "alpha"),
            Tensor("pairs", bundle.pairs, "pairs"),
            Tensor("angles", bundle.angles.astype(np.float32), "angles"),
        ],
        {"g": bundle.group_size, "K": bundle.K, "N": bundle.N, "D_in": bundle.d_in, "num_groups": layout.num_groups},
    )


def bundle_load(path) -> TransformBundle:
    tensors, meta = load_tensors(path)
    try:
        alpha, pairs, angles = (tensors[k].data for k in ("alpha", "pairs", "angles"))
        g = int(meta["g"])
    except (KeyError, ValueError, TypeError) as e:
        raise FormatError(f"{path}: not a bundle file ({e})") from None
    if alpha.dtype != np.float32 or pairs.dtype != np.int32 or angles.dtype != np.float32:
        raise FormatError(f"{path}: wrong tensor dtypes")
    try:
        b = TransformBundle(alpha, pairs, angles, g)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None
    if meta.get("K", b.K) != b.K or meta.get("N", b.N) != b.N or meta.get("D_in", b.d_in) != b.d_in:
        raise FormatError(f"{path}: header fields disagree with tensor shapes")
    return b
