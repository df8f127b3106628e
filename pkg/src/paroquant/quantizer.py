"""Group-wise asymmetric round-to-nearest quantization.

Weights are laid out (D_in, D_out). One (scale, zero) pair is kept for every
``group_size`` consecutive input channels of every output column, so parameter
arrays have shape (num_groups, D_out). A short trailing group is quantized at
its live length.

``rnd`` arguments default to ``np.rint`` (round half to even). Gradient checks
swap in a rounder with frozen residuals to evaluate the STE surrogate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_store import GroupLayout, Tensor, group_layout, load_tensors, save_tensors, FormatError

EPS = 1e-8


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 4
    group_size: int = 128

    def __post_init__(self):
        # 16 bits is accepted as a near-lossless sanity grid
        if not 2 <= self.bits <= 16:
            raise ValueError(f"bits must be in [2, 16], got {self.bits}")
        if self.group_size < 2:
            raise ValueError(f"group_size must be >= 2, got {self.group_size}")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1


@dataclass(frozen=True)
class GroupParams:
    scale: float
    zero_point: float


@dataclass
class QuantizedTensor:
    codes: np.ndarray  # (D_in, D_out), uint8 for bits <= 8 else int32
    scales: np.ndarray  # (num_groups, D_out) float32
    zeros: np.ndarray  # (num_groups, D_out) float32, integer valued
    spec: QuantSpec

    @property
    def layout(self) -> GroupLayout:
        return group_layout(self.codes.shape[0], self.spec.group_size)

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape


# ---------------------------------------------------------------------------
# scalar group ops


def compute_group_params(values, bits: int) -> GroupParams:
    v = np.asarray(values, dtype=np.float32).ravel()
    if v.size == 0:
        raise ValueError("cannot compute quantization parameters of an empty group")
    if not np.all(np.isfinite(v)):
        raise ValueError("group contains non-finite values")
    qmax = np.float32((1 << bits) - 1)
    s = max(np.float32((v.max() - v.min()) / qmax), np.float32(EPS))
    z = np.clip(-np.rint(v.min() / s), 0, qmax)
    return GroupParams(float(s), float(z))


def quantize_group(values, params: GroupParams, bits: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float32)
    s, z = np.float32(params.scale), np.float32(params.zero_point)
    return np.clip(np.rint(v / s) + z, 0, (1 << bits) - 1).astype(_code_dtype(bits))


def dequantize_group(codes, params: GroupParams) -> np.ndarray:
    s, z = np.float32(params.scale), np.float32(params.zero_point)
    return (np.asarray(codes).astype(np.float32) - z) * s


def _code_dtype(bits: int):
    return np.uint8 if bits <= 8 else np.int32


# ---------------------------------------------------------------------------
# matrix ops


def _starts(layout: GroupLayout) -> np.ndarray:
    return np.arange(layout.num_groups) * layout.group_size


def _sizes(layout: GroupLayout) -> np.ndarray:
    return np.array([layout.live(k) for k in range(layout.num_groups)])


def expand_rows(p: np.ndarray, layout: GroupLayout) -> np.ndarray:
    """Broadcast (num_groups, D_out) parameters to (D_in, D_out)."""
    return np.repeat(p, _sizes(layout), axis=0)


def group_sum(a: np.ndarray, layout: GroupLayout) -> np.ndarray:
    return np.add.reduceat(a, _starts(layout), axis=0)


def rtn_params(W: np.ndarray, spec: QuantSpec, rnd=np.rint) -> tuple[np.ndarray, np.ndarray]:
    """Min/max initialisation of (scale, zero) for every (group, column) block."""
    layout = group_layout(W.shape[0], spec.group_size)
    st = _starts(layout)
    mx = np.maximum.reduceat(W, st, axis=0)
    mn = np.minimum.reduceat(W, st, axis=0)
    s = np.maximum((mx - mn) / W.dtype.type(spec.qmax), W.dtype.type(EPS))
    z = np.clip(-rnd(mn / s), 0, spec.qmax)
    return s, z


def quantize_matrix(W: np.ndarray, spec: QuantSpec) -> QuantizedTensor:
    W = np.asarray(W, dtype=np.float32)
    if W.ndim != 2:
        raise ValueError("expected a (D_in, D_out) matrix")
    s, z = rtn_params(W, spec)
    return quantize_with(W, s, z, spec)


def quantize_with(W: np.ndarray, scales: np.ndarray, zeros: np.ndarray, spec: QuantSpec) -> QuantizedTensor:
    """Quantize with given parameters; zeros are rounded to integers first."""
    W = np.asarray(W, dtype=np.float32)
    layout = group_layout(W.shape[0], spec.group_size)
    if scales.shape != (layout.num_groups, W.shape[1]) or zeros.shape != scales.shape:
        raise ValueError(
            f"parameter shape {scales.shape} does not match {(layout.num_groups, W.shape[1])}"
        )
    s = np.asarray(scales, dtype=np.float32)
    z = np.rint(np.asarray(zeros, dtype=np.float32))
    codes = np.clip(np.rint(W / expand_rows(s, layout)) + expand_rows(z, layout), 0, spec.qmax)
    return QuantizedTensor(codes.astype(_code_dtype(spec.bits)), s, z, spec)


def dequantize_matrix(qt: QuantizedTensor) -> np.ndarray:
    layout = qt.layout
    return (qt.codes.astype(np.float32) - expand_rows(qt.zeros, layout)) * expand_rows(qt.scales, layout)


def rtn(W: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Plain round-to-nearest quantize-dequantize of ``W``."""
    return dequantize_matrix(quantize_matrix(W, spec))


# ---------------------------------------------------------------------------
# differentiable fake quantization (STE)


@dataclass
class FakeQuantCache:
    u: np.ndarray  # pre-clamp code value
    q: np.ndarray  # clamped code value
    resid: np.ndarray  # rnd(W/s) - W/s
    s_rows: np.ndarray
    z_rows: np.ndarray  # rounded zero point, expanded
    layout: GroupLayout
    qmax: int


def fake_quant(W, scales, zeros, spec: QuantSpec, rnd=np.rint, cache: bool = False):
    """Quantize-then-dequantize. Forward equals ``dequantize_matrix(quantize_with(...))``."""
    layout = group_layout(W.shape[0], spec.group_size)
    s_rows = expand_rows(scales, layout)
    z_rows = expand_rows(rnd(zeros), layout)
    ws = W / s_rows
    r = rnd(ws)
    u = r + z_rows
    q = np.clip(u, 0, spec.qmax)
    out = (q - z_rows) * s_rows
    if not cache:
        return out
    return out, FakeQuantCache(u, q, r - ws, s_rows, z_rows, layout, spec.qmax)


def fake_quant_backward(grad: np.ndarray, c: FakeQuantCache):
    """STE gradients (dW, dscales, dzeros) of ``fake_quant``.

    Inside the clamp range the round is an identity, so dW = grad,
    d/ds = rnd(W/s) - W/s and d/dz = 0. Clamped elements give dW = 0,
    d/ds = code - z and d/dz = -s.
    """
    inside = (c.u >= 0) & (c.u <= c.qmax)
    dW = np.where(inside, grad, 0)
    ds = group_sum(grad * np.where(inside, c.resid, c.q - c.z_rows), c.layout)
    dz = group_sum(np.where(inside, 0, -grad * c.s_rows), c.layout)
    return dW.astype(grad.dtype), ds, dz


@dataclass
class DynamicCache:
    fq: FakeQuantCache
    mx: np.ndarray
    mn: np.ndarray
    s: np.ndarray
    z_raw: np.ndarray
    arg_mx: np.ndarray
    arg_mn: np.ndarray


def fake_quant_dynamic(W, spec: QuantSpec, rnd=np.rint, cache: bool = False):
    """Fake quantization with (scale, zero) recomputed from ``W`` by min/max.

    Gradients flow through the min/max statistics as well as the values.
    """
    layout = group_layout(W.shape[0], spec.group_size)
    st = _starts(layout)
    mx = np.maximum.reduceat(W, st, axis=0)
    mn = np.minimum.reduceat(W, st, axis=0)
    s = np.maximum((mx - mn) / W.dtype.type(spec.qmax), W.dtype.type(EPS))
    z_raw = -rnd(mn / s)
    z = np.clip(z_raw, 0, spec.qmax)
    res = fake_quant(W, s, z, spec, rnd=rnd, cache=cache)
    if not cache:
        return res
    out, fq = res
    arg_mx = np.empty_like(mx, dtype=np.int64)
    arg_mn = np.empty_like(mn, dtype=np.int64)
    for k, (a, b) in enumerate(layout):
        arg_mx[k] = a + np.argmax(W[a:b], axis=0)
        arg_mn[k] = a + np.argmin(W[a:b], axis=0)
    return out, DynamicCache(fq, mx, mn, s, z_raw, arg_mx, arg_mn)


def fake_quant_dynamic_backward(grad: np.ndarray, c: DynamicCache) -> np.ndarray:
    dW, ds, dz = fake_quant_backward(grad, c.fq)
    qmax = c.fq.qmax
    # z = clip(-rnd(min/s)); STE through rnd
    z_live = (c.z_raw >= 0) & (c.z_raw <= qmax)
    dz = np.where(z_live, dz, 0)
    dmn = -dz / c.s
    ds = ds + dz * c.mn / (c.s * c.s)
    s_live = (c.mx - c.mn) / qmax > EPS
    ds = np.where(s_live, ds, 0)
    dmx = ds / qmax
    dmn = dmn - ds / qmax
    cols = np.arange(grad.shape[1])
    for k in range(c.mx.shape[0]):
        np.add.at(dW, (c.arg_mx[k], cols), dmx[k])
        np.add.at(dW, (c.arg_mn[k], cols), dmn[k])
    return dW


# ---------------------------------------------------------------------------
# serialization


def save_quantized(path, qt: QuantizedTensor, extra: list[Tensor] | None = None, meta: dict | None = None):
    m = {"bits": qt.spec.bits, "group_size": qt.spec.group_size}
    if meta:
        m.update(meta)
    tensors = [
        Tensor("codes", qt.codes if qt.codes.dtype == np.uint8 else qt.codes.astype(np.int32), "codes"),
        Tensor("scales", qt.scales.astype(np.float32), "scales"),
        Tensor("zeros", qt.zeros.astype(np.float32), "zeros"),
    ]
    save_tensors(path, tensors + list(extra or []), m)


def load_quantized(path) -> tuple[QuantizedTensor, dict[str, Tensor], dict]:
    tensors, meta = load_tensors(path)
    try:
        spec = QuantSpec(int(meta["bits"]), int(meta["group_size"]))
        codes, s, z = tensors["codes"].data, tensors["scales"].data, tensors["zeros"].data
    except (KeyError, ValueError) as e:
        raise FormatError(f"{path}: not a quantized tensor file ({e})") from None
    layout = group_layout(codes.shape[0], spec.group_size) if codes.ndim == 2 and codes.shape[0] else None
    if layout is None or s.shape != (layout.num_groups, codes.shape[1]) or z.shape != s.shape:
        raise FormatError(f"{path}: parameter shapes do not match codes")
    if codes.size and (int(codes.max()) > spec.qmax or int(codes.min()) < 0):
        raise FormatError(f"{path}: code out of range for {spec.bits} bits")
    if np.any(s <= 0):
        raise FormatError(f"{path}: non-positive scale")
    return QuantizedTensor(codes, s, z, spec), tensors, meta
