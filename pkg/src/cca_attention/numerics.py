"""Dense numeric helpers shared by every other module.

All verification arithmetic is float64. Arrays are plain ``numpy.ndarray``;
a "token matrix" is any 2-D float array of shape ``(rows, cols)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_MASK64 = (1 << 64) - 1


def as_token_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate and coerce ``x`` to a finite float64 2-D array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected 2-D token matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite entries")
    return arr


def stable_softmax(scores) -> np.ndarray:
    """Softmax of a 1-D score vector via max subtraction."""
    x = np.asarray(scores, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty softmax")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite score")
    e = np.exp(x - x.max())
    return e / e.sum()


def masked_softmax_rows(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax restricted to ``mask``; masked entries come out exactly 0.

    Every row must keep at least one entry.
    """
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    base: float = 10000.0
    enabled: bool = True

    def __post_init__(self):
        if self.head_dim % 2:
            raise ValueError(f"RoPE head_dim must be even, got {self.head_dim}")
        if not self.base > 1:
            raise ValueError(f"RoPE base must exceed 1, got {self.base}")

    def inv_freq(self) -> np.ndarray:
        i = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * i / self.head_dim)


def rope_rotate(x: np.ndarray, positions, params: RopeParams, inverse: bool = False) -> np.ndarray:
    """Rotate rows of ``x`` (shape ``(..., n, head_dim)``) at the given positions.

    Interleaved-pair convention: dims ``2i`` and ``2i+1`` rotate together by
    ``position * base**(-2i/head_dim)``. ``inverse=True`` applies the
    transpose rotation, which is what backprop through RoPE needs.
    """
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    if not params.enabled:
        return x.copy()
    if x.shape[-1] != params.head_dim:
        raise ValueError(f"vector length {x.shape[-1]} != head_dim {params.head_dim}")
    pos = np.asarray(positions, dtype=np.float64)
    theta = pos[:, None] * params.inv_freq()[None, :]
    cos, sin = np.cos(theta).astype(x.dtype), np.sin(theta).astype(x.dtype)
    if inverse:
        sin = -sin
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def apply_rope(v, position: int, params: RopeParams) -> np.ndarray:
    """Rotate a single head vector to ``position`` (0 is the identity)."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError("apply_rope expects a 1-D head vector")
    if v.shape[0] % 2:
        raise ValueError(f"odd-length vector ({v.shape[0]}) cannot be rotated pairwise")
    if position < 0:
        raise ValueError("position must be >= 0")
    return rope_rotate(v[None, :], [position], params)[0]


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5,
                     coords: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    If ``coords`` is given only those flat coordinates are evaluated; the rest
    of the returned gradient is zero.
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"non-finite evaluation at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


class XorShift64Star:
    """xorshift64* generator seeded through splitmix64.

    Recurrence (all arithmetic mod 2**64):
      seed state: z = seed + 0x9E3779B97F4A7C15; z = (z ^ z>>30) * 0xBF58476D1CE4E5B9;
                  z = (z ^ z>>27) * 0x94D049BB133111EB; state = z ^ z>>31 (0 -> 1)
      next:       x ^= x>>12; x ^= x<<25; x ^= x>>27; return x * 0x2545F4914F6CDD1D
    Uniform doubles take the top 53 bits: (r >> 11) * 2**-53.
    """

    def __init__(self, seed: int):
        z = (int(seed) + 0x9E3779B97F4A7C15) & _MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        z ^= z >> 31
        self.state = z or 1

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & _MASK64

    def uniform(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)
        return out


def seeded_init(shape, seed: int, scale: float) -> np.ndarray:
    """Deterministic zero-mean init: uniform on ``[-sqrt(3), sqrt(3)) * scale`` (std == scale)."""
    if not scale > 0:
        raise ValueError("scale must be positive")
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ValueError(f"invalid shape {shape}")
    n = math.prod(shape)
    u = XorShift64Star(seed).uniform(n)
    return ((2.0 * u - 1.0) * (math.sqrt(3.0) * scale)).reshape(shape)
