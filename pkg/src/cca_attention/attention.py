"""Grouped core-token attention: grouping, core-token pooling and the fused
global + local causal attention, plus a plain causal attention oracle.

Positions in the public contracts (``index_plan``, ``partition_groups``) are
1-indexed. Arrays are 0-indexed internally; token ``i`` lives in row ``i-1``
and is rotated by RoPE at position ``i-1``.

Per-head functions accept arrays of shape ``(..., L, d_h)``; leading axes
(heads, batch) broadcast.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from .numerics import RopeParams, masked_softmax_rows, rope_rotate

PoolingMode = Literal["weighted", "mean", "max"]
POOLING_MODES = ("weighted", "mean", "max")


@dataclass(frozen=True)
class AttentionConfig:
    group_size: int = 4
    local_window: int = 64
    n_heads: int = 4
    head_dim: int = 16
    rope_base: float = 10000.0
    rope_enabled: bool = True
    pooling_mode: PoolingMode = "weighted"

    def __post_init__(self):
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")
        if self.local_window < 1:
            raise ValueError(f"local_window must be >= 1, got {self.local_window}")
        if self.n_heads < 1 or self.head_dim < 1:
            raise ValueError("n_heads and head_dim must be >= 1")
        if self.pooling_mode not in POOLING_MODES:
            raise ValueError(f"unknown pooling mode {self.pooling_mode!r}")
        if self.rope_enabled and self.head_dim % 2:
            raise ValueError("head_dim must be even when RoPE is enabled")

    @classmethod
    def long_context(cls, **kw) -> "AttentionConfig":
        """g=16, s=1024 as used for 7B-scale models."""
        kw.setdefault("group_size", 16)
        kw.setdefault("local_window", 1024)
        return cls(**kw)

    @property
    def rope(self) -> RopeParams:
        return RopeParams(head_dim=self.head_dim, base=self.rope_base,
                          enabled=self.rope_enabled)

    def with_geometry(self, group_size: int | None = None,
                      local_window: int | None = None) -> "AttentionConfig":
        """Same config with (g, s) swapped at inference time; projections are untouched."""
        return replace(
            self,
            group_size=self.group_size if group_size is None else group_size,
            local_window=self.local_window if local_window is None else local_window,
        )


@dataclass(frozen=True)
class GroupPartition:
    group_count: int
    groups: list[tuple[int, int]]     # inclusive 1-indexed (first, last)
    trailing: tuple[int, int] | None  # inclusive range of ungrouped tokens


def partition_groups(L: int, g: int) -> GroupPartition:
    if L < 0 or g < 1:
        raise ValueError(f"invalid partition L={L}, g={g}")
    m = L // g
    groups = [((p - 1) * g + 1, p * g) for p in range(1, m + 1)]
    trailing = (m * g + 1, L) if L % g else None
    return GroupPartition(m, groups, trailing)


@dataclass(frozen=True)
class IndexPlan:
    global_end: int   # j: core tokens 1..j are visible
    local_start: int  # first raw token of the local window
    window_len: int   # raw tokens local_start..i


def index_plan(i: int, g: int, s: int) -> IndexPlan:
    """Which core tokens and which raw tokens query ``i`` attends to.

    The local window starts right after the last pooled group, so the global
    and local branches cover tokens 1..i disjointly.
    """
    if i < 1:
        raise ValueError(f"query position must be >= 1, got {i}")
    j = max(0, (i - s) // g)
    return IndexPlan(global_end=j, local_start=j * g + 1, window_len=i - j * g)


def global_ends(L: int, g: int, s: int) -> np.ndarray:
    """Vector of j(i) for i = 1..L."""
    i = np.arange(1, L + 1)
    return np.maximum(0, np.floor_divide(i - s, g))


def group_middle_positions(m: int, g: int) -> np.ndarray:
    """0-indexed RoPE position of the middle token (ceil(g/2)-th) of each group."""
    return np.arange(m) * g + (g + 1) // 2 - 1


@dataclass
class CoreTokenSet:
    phi: np.ndarray      # (..., m, g) pooling weights
    core_k: np.ndarray   # (..., m, d_h)
    core_v: np.ndarray   # (..., m, d_h)
    group_size: int

    @property
    def group_count(self) -> int:
        return self.phi.shape[-2]


def pooling_weights(q_score: np.ndarray, k_score: np.ndarray, g: int,
                    mode: str = "weighted", m: int | None = None) -> np.ndarray:
    """Per-group weights (..., m, g) from each group's last query against the group's keys."""
    L, dh = k_score.shape[-2:]
    if m is None:
        m = L // g
    lead = k_score.shape[:-2]
    if m == 0:
        return np.zeros(lead + (0, g))
    if mode == "mean":
        return np.full(lead + (m, g), 1.0 / g)
    kg = k_score[..., : m * g, :].reshape(lead + (m, g, dh))
    q_last = q_score[..., g - 1: m * g: g, :]
    scores = np.einsum("...md,...mgd->...mg", q_last, kg) / math.sqrt(dh)
    if mode == "weighted":
        scores = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        return e / e.sum(axis=-1, keepdims=True)
    if mode == "max":
        return np.eye(g)[np.argmax(scores, axis=-1)]
    raise ValueError(f"unknown pooling mode {mode!r}")


def pool_core_tokens(q_score, k_score, raw_k, raw_v, g: int,
                     mode: str = "weighted") -> CoreTokenSet:
    """Compress every complete group of ``g`` tokens into one core key/value.

    ``q_score``/``k_score`` are the (possibly rotated) queries and keys used
    to score tokens within a group; ``raw_k``/``raw_v`` are the rows actually
    mixed. Since the pooled row is a convex combination, pooling projected
    rows equals projecting the pooled token.
    """
    q_score, k_score = np.asarray(q_score), np.asarray(k_score)
    raw_k, raw_v = np.asarray(raw_k), np.asarray(raw_v)
    L = k_score.shape[-2]
    if not (q_score.shape[-2] == L == raw_k.shape[-2] == raw_v.shape[-2]):
        raise ValueError("pooling inputs must share the same row count")
    if g < 1:
        raise ValueError("group size must be >= 1")
    m = L // g
    phi = pooling_weights(q_score, k_score, g, mode, m)
    lead_k, lead_v = raw_k.shape[:-2], raw_v.shape[:-2]
    kg = raw_k[..., : m * g, :].reshape(lead_k + (m, g, raw_k.shape[-1]))
    vg = raw_v[..., : m * g, :].reshape(lead_v + (m, g, raw_v.shape[-1]))
    core_k = np.einsum("...mg,...mgd->...md", phi, kg)
    core_v = np.einsum("...mg,...mgd->...md", phi, vg)
    return CoreTokenSet(phi=phi, core_k=core_k, core_v=core_v, group_size=g)


def rotate_core_keys(core: CoreTokenSet, rope: RopeParams) -> CoreTokenSet:
    """Copy of ``core`` whose keys carry the RoPE phase of their group's middle token."""
    pos = group_middle_positions(core.group_count, core.group_size)
    return replace(core, core_k=rope_rotate(core.core_k, pos, rope))


def _check_core(q, core: CoreTokenSet, g: int, s: int):
    if core.group_size != g:
        raise ValueError(f"core tokens pooled with g={core.group_size}, config has g={g}")
    L = q.shape[-2]
    need = max(0, (L - s) // g)
    if core.group_count < need:
        raise ValueError(f"{core.group_count} core tokens, queries need {need}")


def cca_masks(L: int, m: int, g: int, s: int) -> tuple[np.ndarray, np.ndarray]:
    """Boolean visibility masks: core (L, m) and raw (L, L)."""
    j = global_ends(L, g, s)
    core_mask = np.arange(m)[None, :] < j[:, None]
    rows = np.arange(L)[:, None]
    cols = np.arange(L)[None, :]
    raw_mask = (cols >= (j * g)[:, None]) & (cols <= rows)
    return core_mask, raw_mask


def cca_attention_probs(q, k, core_k, g: int, s: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense per-query weights over [core tokens; raw tokens]; O(L^2) memory.

    Returns ``(p_core, p_raw)`` with shapes (..., L, m) and (..., L, L); each
    query row of the concatenation sums to 1.
    """
    L, dh = q.shape[-2:]
    m = core_k.shape[-2]
    scale = 1.0 / math.sqrt(dh)
    core_mask, raw_mask = cca_masks(L, m, g, s)
    logits = np.concatenate([q @ np.swapaxes(core_k, -1, -2), q @ np.swapaxes(k, -1, -2)],
                            axis=-1) * scale
    mask = np.concatenate([core_mask, raw_mask], axis=-1)
    p = masked_softmax_rows(logits, mask)
    return p[..., :m], p[..., m:]


def fused_cca_attention(q, k, v, core: CoreTokenSet, config: AttentionConfig,
                        block: int = 256) -> np.ndarray:
    """One softmax per query over [core keys 1..j(i); raw keys l(i)..i].

    ``q``/``k`` are used as given (already rotated if RoPE is on), and so is
    ``core.core_k``. Query rows are processed in blocks so memory stays
    O(block * (m + s + g + block)).
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    if not (q.shape[-2] == k.shape[-2] == v.shape[-2]):
        raise ValueError("q, k, v must share the same row count")
    g, s = config.group_size, config.local_window
    _check_core(q, core, g, s)
    L, dh = q.shape[-2:]
    out = np.empty(q.shape[:-1] + (v.shape[-1],), dtype=np.result_type(q, v))
    if L == 0:
        return out
    scale = 1.0 / math.sqrt(dh)
    j_all = global_ends(L, g, s)
    ck, cv = core.core_k, core.core_v
    for a in range(0, L, block):
        b = min(L, a + block)
        j = j_all[a:b]
        jmax = int(j[-1])
        lo = int(j[0]) * g
        qb = q[..., a:b, :]
        lc = (qb @ np.swapaxes(ck[..., :jmax, :], -1, -2)) * scale
        lr = (qb @ np.swapaxes(k[..., lo:b, :], -1, -2)) * scale
        rows = np.arange(a, b)[:, None]
        cols = np.arange(lo, b)[None, :]
        mask = np.concatenate([np.arange(jmax)[None, :] < j[:, None],
                               (cols >= (j * g)[:, None]) & (cols <= rows)], axis=-1)
        p = masked_softmax_rows(np.concatenate([lc, lr], axis=-1), mask)
        out[..., a:b, :] = p[..., :jmax] @ cv[..., :jmax, :] + p[..., jmax:] @ v[..., lo:b, :]
    return out


def full_causal_attention(q, k, v, block: int = 256) -> np.ndarray:
    """softmax(q k^T / sqrt(d_h)) v under a causal mask, blocked over queries."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    if not (q.shape[-2] == k.shape[-2] == v.shape[-2]):
        raise ValueError("q, k, v must share the same row count")
    L, dh = q.shape[-2:]
    out = np.empty(q.shape[:-1] + (v.shape[-1],), dtype=np.result_type(q, v))
    scale = 1.0 / math.sqrt(dh)
    for a in range(0, L, block):
        b = min(L, a + block)
        logits = (q[..., a:b, :] @ np.swapaxes(k[..., :b, :], -1, -2)) * scale
        mask = np.arange(b)[None, :] <= np.arange(a, b)[:, None]
        out[..., a:b, :] = masked_softmax_rows(logits, mask) @ v[..., :b, :]
    return out


def causal_attention_probs(q, k) -> np.ndarray:
    L, dh = q.shape[-2:]
    logits = (q @ np.swapaxes(k, -1, -2)) / math.sqrt(dh)
    return masked_softmax_rows(logits, np.tril(np.ones((L, L), dtype=bool)))


@dataclass
class ProjectionWeights:
    wq: np.ndarray  # (d, H*d_h)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray  # (H*d_h, d)


def split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    """(L, H*d_h) -> (H, L, d_h)"""
    L, hd = x.shape
    return x.reshape(L, n_heads, hd // n_heads).transpose(1, 0, 2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """(H, L, d_h) -> (L, H*d_h)"""
    H, L, dh = x.shape
    return x.transpose(1, 0, 2).reshape(L, H * dh)


def cca_heads(xq, xk, xv, config: AttentionConfig) -> tuple[np.ndarray, CoreTokenSet]:
    """Per-head CCA over pre-RoPE projections of shape (H, L, d_h).

    Returns the per-head outputs and the (unrotated) core-token set, whose
    keys obey ``core_k == phi @ xk`` group by group.
    """
    L = xq.shape[-2]
    pos = np.arange(L)
    rope = config.rope
    q = rope_rotate(xq, pos, rope)
    k = rope_rotate(xk, pos, rope)
    core = pool_core_tokens(q, k, xk, xv, config.group_size, config.pooling_mode)
    out = fused_cca_attention(q, k, xv, rotate_core_keys(core, rope), config)
    return out, core


def _check_weights(d: int, weights: ProjectionWeights, config: AttentionConfig):
    hd = config.n_heads * config.head_dim
    for name in ("wq", "wk", "wv"):
        if getattr(weights, name).shape != (d, hd):
            raise ValueError(f"{name} has shape {getattr(weights, name).shape}, "
                             f"expected ({d}, {hd}) for {config.n_heads} heads x {config.head_dim}")
    if weights.wo.shape != (hd, d):
        raise ValueError(f"wo has shape {weights.wo.shape}, expected ({hd}, {d})")


def multi_head_cca(X, weights: ProjectionWeights, config: AttentionConfig) -> np.ndarray:
    """Project, run CCA per head, concatenate heads, output-project."""
    X = np.asarray(X, dtype=np.float64)
    _check_weights(X.shape[1], weights, config)
    H = config.n_heads
    out, _ = cca_heads(split_heads(X @ weights.wq, H), split_heads(X @ weights.wk, H),
                       split_heads(X @ weights.wv, H), config)
    return merge_heads(out) @ weights.wo


def multi_head_full(X, weights: ProjectionWeights, config: AttentionConfig) -> np.ndarray:
    """Dense causal multi-head attention with the same projections (RoPE per config)."""
    X = np.asarray(X, dtype=np.float64)
    _check_weights(X.shape[1], weights, config)
    H = config.n_heads
    pos = np.arange(X.shape[0])
    q = rope_rotate(split_heads(X @ weights.wq, H), pos, config.rope)
    k = rope_rotate(split_heads(X @ weights.wk, H), pos, config.rope)
    out = full_causal_attention(q, k, split_heads(X @ weights.wv, H))
    return merge_heads(out) @ weights.wo
