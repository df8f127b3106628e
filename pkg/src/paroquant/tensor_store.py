"""Matrix helpers, group partitioning, the shared PRNG and the PQT1 tensor file."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"PQT1"
_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4"), "u8": np.dtype("u1")}
_MASK64 = (1 << 64) - 1


class FormatError(ValueError):
    """Raised when a tensor file is malformed or violates a stored invariant."""


def as_matrix(a, dtype=np.float32) -> np.ndarray:
    """Validate a 2-D finite array and return it as a C-contiguous ``dtype`` array."""
    m = np.ascontiguousarray(a, dtype=dtype)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains NaN or Inf")
    return m


# ---------------------------------------------------------------------------
# groups


@dataclass(frozen=True)
class GroupLayout:
    size: int  # number of channels being partitioned (D_in)
    group_size: int
    num_groups: int
    padded: bool

    def bounds(self, k: int) -> tuple[int, int]:
        start = k * self.group_size
        return start, min(start + self.group_size, self.size)

    def live(self, k: int) -> int:
        start, stop = self.bounds(k)
        return stop - start

    def __iter__(self):
        for k in range(self.num_groups):
            yield self.bounds(k)


def group_layout(size: int, g: int) -> GroupLayout:
    if g < 2:
        raise ValueError(f"group size must be >= 2, got {g}")
    if size < 1:
        raise ValueError("cannot partition an empty channel dimension")
    return GroupLayout(size, g, math.ceil(size / g), size % g != 0)


def partition_groups(m: np.ndarray, g: int) -> tuple[GroupLayout, list[np.ndarray]]:
    """Split the rows of ``m`` into consecutive groups of ``g`` (views, last may be short)."""
    layout = group_layout(m.shape[0], g)
    return layout, [m[a:b] for a, b in layout]


# ---------------------------------------------------------------------------
# PRNG: SplitMix64 seeding a xoshiro256** core (public reference algorithms)


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


class Rng:
    """xoshiro256** generator. Single owner; not safe to share between threads."""

    def __init__(self, seed: int = 0):
        sm = seed & _MASK64
        s = []
        for _ in range(4):
            sm, out = _splitmix64(sm)
            s.append(out)
        self._s = s

    def next_u64(self) -> int:
        s = self._s
        result = (_rotl((s[1] * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s[1] << 17) & _MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection of the low 2**64 mod n outputs."""
        if n <= 0:
            raise ValueError("bound must be positive")
        threshold = ((1 << 64) - n) % n
        while True:
            r = self.next_u64()
            if r >= threshold:
                return r % n

    def shuffle(self, items: Sequence) -> list:
        """Fisher-Yates: for i = n-1 .. 1 swap items[i] with items[below(i + 1)]."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.below(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def spawn_seed(self) -> int:
        return self.next_u64()

    def numpy(self) -> np.random.Generator:
        """Bulk-draw generator for synthetic data, seeded from this stream."""
        return np.random.default_rng(self.next_u64())


def rng_shuffle(items: Sequence, rng: Rng) -> list:
    return rng.shuffle(items)


# ---------------------------------------------------------------------------
# PQT1 tensor file


@dataclass
class Tensor:
    name: str
    data: np.ndarray
    role: str = ""


def _dtype_tag(a: np.ndarray) -> str:
    if a.dtype == np.float32:
        return "f32"
    if a.dtype == np.int32:
        return "i32"
    if a.dtype == np.uint8:
        return "u8"
    raise ValueError(f"unsupported dtype {a.dtype}; use float32, int32 or uint8")


def save_tensors(path, tensors: Iterable[Tensor], meta: dict | None = None) -> None:
    tensors = list(tensors)
    names = [t.name for t in tensors]
    if len(set(names)) != len(names):
        raise ValueError("tensor names must be unique")
    entries, blobs = [], []
    for t in tensors:
        tag = _dtype_tag(t.data)
        entries.append({"name": t.name, "shape": list(t.data.shape), "dtype": tag, "role": t.role})
        blobs.append(np.ascontiguousarray(t.data, dtype=_DTYPES[tag]).tobytes())
    header = {"tensors": entries}
    if meta:
        header["meta"] = meta
    hb = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        for b in blobs:
            f.write(b)


def load_tensors(path) -> tuple[dict[str, Tensor], dict]:
    """Read a PQT1 file. Returns (tensors by name in write order, meta dict)."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if 8 + hlen > len(raw):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
        entries = header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: unreadable header ({e})") from None
    out: dict[str, Tensor] = {}
    offset = 8 + hlen
    for e in entries:
        try:
            dt = _DTYPES[e["dtype"]]
            shape = tuple(int(d) for d in e["shape"])
            name = e["name"]
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{path}: bad tensor entry {e!r}") from None
        if any(d < 0 for d in shape):
            raise FormatError(f"{path}: negative dimension in {name}")
        if name in out:
            raise FormatError(f"{path}: duplicate tensor name {name}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated payload at {name}")
        data = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape)
        out[name] = Tensor(name, data.copy(), e.get("role", ""))
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return out, header.get("meta", {})
