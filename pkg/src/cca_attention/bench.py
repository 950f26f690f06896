"""FLOP ledger, KV-memory accounting, wall-clock timing and a sink + window baseline.

FLOP convention: attention score and value-mixing work only (projections are
identical across variants and excluded); one multiply-add counts as 2 FLOPs.

* full prefill:   sum_i 2 * i * (2 d_h) * H
* cca prefill:    sum_i 2 * (j(i) + w(i)) * (2 d_h) * H
                  + pooling of the j(L) groups some query actually reads,
                  2 * 3 g d_h * H per group (scores, key mix, value mix)
* sink prefill:   sum_i 2 * min(i, n_sink + window) * (2 d_h) * H
* decode_per_token at context L: the same per-query term for query L; cca
  adds one group pooling when token L completes a group.

Fixed-m mode (``fixed_groups=m``) sets g = max(1, L // m) per sweep point,
the setting used for fixed-length inputs; otherwise g is constant.
"""
from __future__ import annotations

import csv
import math
import os
import platform
import statistics
import time
from dataclasses import astuple, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .attention import (AttentionConfig, cca_heads, full_causal_attention, global_ends,
                        group_middle_positions, pool_core_tokens)
from .numerics import masked_softmax_rows, rope_rotate

VARIANTS = ("full", "cca", "sink_window")
MODES = ("prefill", "decode_per_token")
CSV_HEADER = ["variant", "mode", "L", "g", "s", "heads", "head_dim",
              "flops_attention", "kv_bytes", "wall_ms"]
DEFAULT_SINKS = 4


@dataclass
class BenchRecord:
    variant: str
    mode: str
    L: int
    g: int
    s: int
    heads: int
    head_dim: int
    flops_attention: int
    kv_bytes: int
    wall_ms: float


def effective_group_size(L: int, config: AttentionConfig, fixed_groups: int | None = None) -> int:
    if fixed_groups is None:
        return config.group_size
    if fixed_groups < 1:
        raise ValueError("fixed_groups must be >= 1")
    return max(1, L // fixed_groups)


def _sink_window_len(config: AttentionConfig, window: int | None) -> int:
    return config.local_window if window is None else window


def flops_attention(variant: str, L: int, config: AttentionConfig, mode: str = "prefill",
                    fixed_groups: int | None = None, n_sink: int = DEFAULT_SINKS,
                    window: int | None = None) -> int:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if L <= 0:
        return 0
    per_key = 2 * 2 * config.head_dim * config.n_heads
    if variant == "full":
        keys = L * (L + 1) // 2 if mode == "prefill" else L
        return per_key * keys
    if variant == "sink_window":
        span = n_sink + _sink_window_len(config, window)
        if mode == "decode_per_token":
            return per_key * min(L, span)
        i = np.arange(1, L + 1, dtype=np.int64)
        return per_key * int(np.minimum(i, span).sum())
    g = effective_group_size(L, config, fixed_groups)
    s = config.local_window
    pool = 2 * 3 * g * config.head_dim * config.n_heads
    if mode == "decode_per_token":
        j = max(0, (L - s) // g)
        keys = j + (L - j * g)
        return per_key * keys + (pool if L % g == 0 else 0)
    j = global_ends(L, g, s).astype(np.int64)
    i = np.arange(1, L + 1, dtype=np.int64)
    keys = int((j + i - j * g).sum())
    return per_key * keys + pool * int(j[-1])


def kv_bytes(variant: str, L: int, config: AttentionConfig, n_sink: int = DEFAULT_SINKS,
             window: int | None = None, fixed_groups: int | None = None) -> int:
    """Bytes of cached keys and values (f64) after consuming L tokens."""
    per_entry = 2 * 8 * config.head_dim * config.n_heads
    if L <= 0:
        return 0
    if variant == "full":
        return per_entry * L
    if variant == "cca":
        g = effective_group_size(L, config, fixed_groups)
        return per_entry * (L // g + min(L, config.local_window + g))
    if variant == "sink_window":
        return per_entry * min(L, n_sink + _sink_window_len(config, window))
    raise ValueError(f"unknown variant {variant!r}")


# -- sink + window baseline ---------------------------------------------------

def sink_window_mask(L: int, n_sink: int, window: int, offset: int = 0, rows: int | None = None):
    """Visibility of keys 0..L-1 for query rows offset..offset+rows-1 (0-indexed)."""
    if n_sink < 0 or window < 1:
        raise ValueError("need n_sink >= 0 and window >= 1")
    rows = L - offset if rows is None else rows
    r = np.arange(offset, offset + rows)[:, None]
    c = np.arange(L)[None, :]
    return (c <= r) & ((c < n_sink) | (c > r - window))


def sink_window_weights(q, k, n_sink: int, window: int) -> np.ndarray:
    L, dh = q.shape[-2:]
    logits = (q @ np.swapaxes(k, -1, -2)) / math.sqrt(dh)
    return masked_softmax_rows(logits, sink_window_mask(L, n_sink, window))


def sink_window_attention(q, k, v, n_sink: int, window: int, block: int = 256) -> np.ndarray:
    """Each query sees the first ``n_sink`` tokens and its last ``window`` tokens."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    L, dh = q.shape[-2:]
    out = np.empty(q.shape[:-1] + (v.shape[-1],), dtype=np.result_type(q, v))
    scale = 1.0 / math.sqrt(dh)
    for a in range(0, L, block):
        b = min(L, a + block)
        lo = max(0, a - window + 1)
        sink_cols = np.arange(min(n_sink, lo))
        cols = np.concatenate([sink_cols, np.arange(lo, b)])
        logits = (q[..., a:b, :] @ np.swapaxes(k[..., cols, :], -1, -2)) * scale
        r = np.arange(a, b)[:, None]
        c = cols[None, :]
        mask = (c <= r) & ((c < n_sink) | (c > r - window))
        out[..., a:b, :] = masked_softmax_rows(logits, mask) @ v[..., cols, :]
    return out


# -- instrumented execution ---------------------------------------------------

def debug_cca_forward(q, k, v, config: AttentionConfig):
    """Scalar-loop CCA for a single head that counts every multiply-add.

    Pools only the groups some query reads. Returns (output, flops) with
    flops = 2 * multiply-adds, directly comparable to ``flops_attention``.
    """
    q, k, v = (np.asarray(x, dtype=np.float64) for x in (q, k, v))
    L, dh = q.shape
    g, s = config.group_size, config.local_window
    macs = 0
    scale = 1.0 / math.sqrt(dh)
    n_used = max(0, (L - s) // g)
    core_k, core_v = [], []
    for p in range(n_used):
        last = (p + 1) * g - 1
        scores = []
        for r in range(p * g, (p + 1) * g):
            acc = 0.0
            for d in range(dh):
                acc += q[last, d] * k[r, d]
                macs += 1
            scores.append(acc * scale)
        if config.pooling_mode == "weighted":
            e = np.exp(np.array(scores) - max(scores))
            phi = e / e.sum()
        elif config.pooling_mode == "mean":
            phi = np.full(g, 1.0 / g)
        else:
            phi = np.eye(g)[int(np.argmax(scores))]
        ck, cv = np.zeros(dh), np.zeros(dh)
        for r in range(g):
            for d in range(dh):
                ck[d] += phi[r] * k[p * g + r, d]
                cv[d] += phi[r] * v[p * g + r, d]
                macs += 2
        core_k.append(ck)
        core_v.append(cv)
    out = np.zeros((L, v.shape[1]))
    for i in range(1, L + 1):
        j = max(0, (i - s) // g)
        keys = core_k[:j] + [k[t] for t in range(j * g, i)]
        vals = core_v[:j] + [v[t] for t in range(j * g, i)]
        logits = []
        for key in keys:
            acc = 0.0
            for d in range(dh):
                acc += q[i - 1, d] * key[d]
                macs += 1
            logits.append(acc * scale)
        e = np.exp(np.array(logits) - max(logits))
        w = e / e.sum()
        for wt, val in zip(w, vals):
            for d in range(v.shape[1]):
                out[i - 1, d] += wt * val[d]
                macs += 1
    return out, 2 * macs


# -- timing ---------------------------------------------------------------------

def _inputs(L: int, config: AttentionConfig, seed: int, dtype):
    rng = np.random.default_rng(seed)
    shape = (config.n_heads, L, config.head_dim)
    return tuple(rng.standard_normal(shape).astype(dtype) for _ in range(3))


def _prefill_fn(variant, q, k, v, config, n_sink, window):
    if variant == "full":
        def run():
            pos = np.arange(q.shape[-2])
            return full_causal_attention(rope_rotate(q, pos, config.rope).astype(q.dtype),
                                         rope_rotate(k, pos, config.rope).astype(k.dtype), v)
    elif variant == "cca":
        def run():
            return cca_heads(q, k, v, config)[0]
    else:
        def run():
            pos = np.arange(q.shape[-2])
            return sink_window_attention(rope_rotate(q, pos, config.rope).astype(q.dtype),
                                         rope_rotate(k, pos, config.rope).astype(k.dtype), v,
                                         n_sink, window)
    return run


def _decode_fn(variant, q, k, v, config, n_sink, window):
    """One decode step for the last token, against state prepared outside the timer."""
    L, dh = q.shape[-2:]
    scale = 1.0 / math.sqrt(dh)
    qi = q[..., -1:, :]
    if variant == "full":
        K, V = k, v
    elif variant == "sink_window":
        cols = np.unique(np.concatenate([np.arange(min(n_sink, L)),
                                         np.arange(max(0, L - window), L)]))
        K, V = k[..., cols, :], v[..., cols, :]
    else:
        g, s = config.group_size, config.local_window
        j = max(0, (L - s) // g)
        core = pool_core_tokens(q, k, k, v, g, config.pooling_mode)
        ck = rope_rotate(core.core_k, group_middle_positions(core.group_count, g),
                         config.rope).astype(q.dtype)
        K = np.concatenate([ck[..., :j, :], k[..., j * g:, :]], axis=-2)
        V = np.concatenate([core.core_v[..., :j, :].astype(v.dtype), v[..., j * g:, :]], axis=-2)
        if L % g == 0:
            grp_k, grp_v = k[..., L - g:, :], v[..., L - g:, :]

            def run():
                sc = (qi @ np.swapaxes(grp_k, -1, -2)) * scale
                e = np.exp(sc - sc.max(-1, keepdims=True))
                phi = e / e.sum(-1, keepdims=True)
                _ = (phi @ grp_k, phi @ grp_v)
                return _attend(qi, K, V, scale)
            return run

    def run():
        return _attend(qi, K, V, scale)
    return run


def _attend(qi, K, V, scale):
    z = (qi @ np.swapaxes(K, -1, -2)) * scale
    e = np.exp(z - z.max(-1, keepdims=True))
    return (e / e.sum(-1, keepdims=True)) @ V


def time_ms(fn, repeats: int = 5, warmup: int = 1) -> float:
    """Median wall-clock milliseconds after warm-up runs."""
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(samples)


def bench_point(variant: str, mode: str, L: int, config: AttentionConfig, repeats: int = 5,
                warmup: int = 1, fixed_groups: int | None = None, n_sink: int = DEFAULT_SINKS,
                window: int | None = None, dtype=np.float64, seed: int = 0,
                timed: bool = True) -> BenchRecord:
    g = effective_group_size(L, config, fixed_groups)
    cfg = config.with_geometry(group_size=g)
    win = _sink_window_len(config, window)
    wall = float("nan")
    if timed:
        q, k, v = _inputs(L, cfg, seed, dtype)
        make = _prefill_fn if mode == "prefill" else _decode_fn
        wall = time_ms(make(variant, q, k, v, cfg, n_sink, win), repeats, warmup)
    return BenchRecord(
        variant=variant, mode=mode, L=L, g=g, s=cfg.local_window, heads=cfg.n_heads,
        head_dim=cfg.head_dim,
        flops_attention=flops_attention(variant, L, cfg, mode, n_sink=n_sink, window=win),
        kv_bytes=kv_bytes(variant, L, cfg, n_sink=n_sink, window=win),
        wall_ms=wall,
    )


def machine_comment() -> list[str]:
    return [
        f"# machine: {platform.platform()} | python {platform.python_version()} "
        f"| numpy {np.__version__} | cpus {os.cpu_count()}",
        "# flops_attention counts score + value-mix multiply-adds x2; projections excluded",
    ]


def write_csv(records: Sequence[BenchRecord], path, comments: Iterable[str] = ()) -> None:
    with open(path, "w", newline="") as f:
        for line in comments:
            f.write(line.rstrip("\n") + "\n")
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for r in records:
            row = list(astuple(r))
            row[-1] = f"{r.wall_ms:.4f}"
            w.writerow(row)


def read_csv(path) -> list[BenchRecord]:
    with open(path) as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    types = {fl.name: fl.type for fl in fields(BenchRecord)}
    conv = {"int": int, "float": float, "str": str}
    return [BenchRecord(**{k: conv[types[k]](v) for k, v in row.items()}) for row in rows]


def run_suite(config: AttentionConfig, lengths: Sequence[int], variants: Sequence[str],
              path, modes: Sequence[str] = MODES, repeats: int = 5, warmup: int = 1,
              fixed_groups: int | None = None, n_sink: int = DEFAULT_SINKS,
              window: int | None = None, dtype=np.float64, seed: int = 0,
              timed: bool = True) -> list[BenchRecord]:
    """Sweep (variant, mode, L), write the CSV and return the records."""
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    records = [
        bench_point(v, mode, L, config, repeats, warmup, fixed_groups, n_sink, window,
                    dtype, seed, timed)
        for v in variants for mode in modes for L in lengths
    ]
    write_csv(records, path, machine_comment())
    return records


def fit_r2(x, y) -> float:
    """R^2 of the least-squares line y ~ a*x + b."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    a, b = np.polyfit(x, y, 1)
    resid = y - (a * x + b)
    ss_tot = np.sum((y - y.mean()) ** 2)
    return 1.0 - float(np.sum(resid ** 2) / ss_tot)
