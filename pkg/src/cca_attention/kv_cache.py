"""Streaming decode cache for one CCA attention layer.

State per layer:
  * core keys/values, one entry per completed group (keys already rotated to
    the group-middle position);
  * a ring of the most recent ``s + g`` raw tokens (rotated key, pre-RoPE key,
    value, position). The newest ``t mod g`` ring entries are the pending,
    not-yet-pooled group, so they are not stored twice.

Rows passed in are pre-RoPE per-head projections of shape (H, d_h).
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .attention import (AttentionConfig, cca_heads, group_middle_positions,
                        pooling_weights, rotate_core_keys)
from .numerics import masked_softmax_rows, rope_rotate

BYTES_PER_VALUE = 8


@dataclass(frozen=True)
class CacheStats:
    core_entries: int
    raw_entries: int
    pending_entries: int
    kv_bytes: int


class DecodeCache:
    def __init__(self, config: AttentionConfig):
        self.config = config
        self.t = 0
        self.core_k: list[np.ndarray] = []
        self.core_v: list[np.ndarray] = []
        self.ring: deque = deque(maxlen=config.group_size + config.local_window)

    @property
    def g(self) -> int:
        return self.config.group_size

    @property
    def s(self) -> int:
        return self.config.local_window

    @property
    def pending(self) -> int:
        return self.t % self.g

    def set_geometry(self, group_size: int | None = None, local_window: int | None = None):
        """Pick (g, s) for this stream. Only allowed before the first token."""
        if self.t:
            raise RuntimeError("cannot change (g, s) of a cache that already holds tokens")
        self.__init__(self.config.with_geometry(group_size, local_window))

    def _check_row(self, x, name):
        x = np.asarray(x, dtype=np.float64)
        want = (self.config.n_heads, self.config.head_dim)
        if x.shape != want:
            raise ValueError(f"{name} row has shape {x.shape}, expected {want}")
        return x

    def append(self, q, k, v) -> np.ndarray:
        """Consume one token; return its attention output (H, d_h)."""
        q, k, v = (self._check_row(x, n) for x, n in ((q, "q"), (k, "k"), (v, "v")))
        rope = self.config.rope
        pos = self.t
        qr = rope_rotate(q[:, None, :], [pos], rope)[:, 0]
        kr = rope_rotate(k[:, None, :], [pos], rope)[:, 0]
        self.ring.append((pos, kr, k, v))
        self.t += 1
        i = self.t
        g, s = self.g, self.s

        j = max(0, (i - s) // g)
        start = j * g  # 0-indexed first raw token of the window
        window = [e for e in self.ring if e[0] >= start]
        keys = [self.core_k[p] for p in range(j)] + [e[1] for e in window]
        vals = [self.core_v[p] for p in range(j)] + [e[3] for e in window]
        K = np.stack(keys, axis=1)  # (H, n, d_h)
        V = np.stack(vals, axis=1)
        logits = np.einsum("hd,hnd->hn", qr, K) / math.sqrt(self.config.head_dim)
        p = masked_softmax_rows(logits, np.ones(logits.shape, dtype=bool))
        out = np.einsum("hn,hnd->hd", p, V)

        if i % g == 0:
            self._pool_last_group(qr)
        return out

    def _pool_last_group(self, q_last: np.ndarray):
        g = self.g
        grp = list(self.ring)[-g:]
        k_rot = np.stack([e[1] for e in grp], axis=1)  # (H, g, d_h)
        k_raw = np.stack([e[2] for e in grp], axis=1)
        v = np.stack([e[3] for e in grp], axis=1)
        # pooling_weights scores the last query of a length-g sequence
        q_seq = np.zeros_like(k_rot)
        q_seq[:, -1] = q_last
        phi = pooling_weights(q_seq, k_rot, g, self.config.pooling_mode, m=1)[:, 0]  # (H, g)
        ck = np.einsum("hg,hgd->hd", phi, k_raw)
        p = len(self.core_k)
        mid = group_middle_positions(p + 1, g)[p]
        self.core_k.append(rope_rotate(ck[:, None, :], [mid], self.config.rope)[:, 0])
        self.core_v.append(np.einsum("hg,hgd->hd", phi, v))

    def prefill(self, q, k, v) -> np.ndarray:
        """Batch-process a prompt of pre-RoPE projections (H, L, d_h) into a fresh cache."""
        if self.t:
            raise RuntimeError("prefill requires an empty cache")
        q, k, v = (np.asarray(x, dtype=np.float64) for x in (q, k, v))
        H, L, dh = q.shape
        if (H, dh) != (self.config.n_heads, self.config.head_dim):
            raise ValueError(f"prefill rows have head layout {(H, dh)}, "
                             f"expected {(self.config.n_heads, self.config.head_dim)}")
        if L == 0:
            return np.zeros((H, 0, dh))
        out, core = cca_heads(q, k, v, self.config)
        rotated = rotate_core_keys(core, self.config.rope)
        m = core.group_count
        self.core_k = [rotated.core_k[:, p] for p in range(m)]
        self.core_v = [core.core_v[:, p] for p in range(m)]
        kr = rope_rotate(k, np.arange(L), self.config.rope)
        for pos in range(max(0, L - self.ring.maxlen), L):
            self.ring.append((pos, kr[:, pos], k[:, pos], v[:, pos]))
        self.t = L
        return out

    def stats(self) -> CacheStats:
        core, raw = len(self.core_k), len(self.ring)
        per_entry = BYTES_PER_VALUE * self.config.head_dim * self.config.n_heads * 2
        return CacheStats(core_entries=core, raw_entries=raw,
                          pending_entries=self.pending, kv_bytes=per_entry * (core + raw))


def cache_new(config: AttentionConfig) -> DecodeCache:
    return DecodeCache(config)


def cache_append(cache: DecodeCache, q, k, v) -> np.ndarray:
    return cache.append(q, k, v)


def cache_prefill(cache: DecodeCache, q, k, v) -> np.ndarray:
    return cache.prefill(q, k, v)


def cache_stats(cache: DecodeCache) -> CacheStats:
    return cache.stats()
