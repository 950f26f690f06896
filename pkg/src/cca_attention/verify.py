"""Named invariant checks run by ``cca verify``.

Each check returns a :class:`CheckResult`; the suite is cheap enough to run in
a few seconds at desk scale.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .attention import (POOLING_MODES, AttentionConfig, cca_heads, full_causal_attention,
                        pool_core_tokens, rotate_core_keys)
from .bench import debug_cca_forward, flops_attention, kv_bytes, sink_window_weights
from .expansion import ExpandedWeights, expand_weights, reachability_report, reconstruct_output
from .kv_cache import DecodeCache
from .model import ModelConfig, lm_loss, loss_and_grad, model_init
from .numerics import RopeParams, apply_rope, finite_diff_grad, rope_rotate, stable_softmax


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def _rotated(q, k, cfg):
    pos = np.arange(q.shape[-2])
    return rope_rotate(q, pos, cfg.rope), rope_rotate(k, pos, cfg.rope)


def check_softmax(rng, cfg) -> CheckResult:
    x = _rand(rng, 17) * 50
    err = np.abs(stable_softmax(x) - stable_softmax(x + 1234.5)).max()
    total = abs(stable_softmax(x).sum() - 1)
    return CheckResult("softmax_shift_invariance", err <= 1e-12 and total <= 1e-12,
                       f"shift err {err:.1e}, sum err {total:.1e}")


def check_rope(rng, cfg) -> CheckResult:
    rp = RopeParams(head_dim=cfg.head_dim, base=cfg.rope_base)
    q, k = _rand(rng, cfg.head_dim), _rand(rng, cfg.head_dim)
    norm_err = max(abs(np.linalg.norm(apply_rope(q, p, rp)) - np.linalg.norm(q))
                   for p in (0, 7, 100, 5000))
    dots = [apply_rope(q, p + 5, rp) @ apply_rope(k, p, rp) for p in (0, 7, 100)]
    rel_err = max(dots) - min(dots)
    return CheckResult("rope_isometry_relative", norm_err <= 1e-12 and rel_err <= 1e-10,
                       f"norm drift {norm_err:.1e}, relative-phase spread {rel_err:.1e}")


def check_oracle_g1(rng, cfg) -> CheckResult:
    c = replace(cfg, group_size=1, rope_enabled=False)
    worst = 0.0
    for L in (1, 3, 17, 32, 64):
        q, k, v = (_rand(rng, c.n_heads, L, c.head_dim) for _ in range(3))
        out, _ = cca_heads(q, k, v, c)
        worst = max(worst, np.abs(out - full_causal_attention(q, k, v)).max())
    return CheckResult("oracle_equivalence_g1", worst <= 1e-10, f"max err {worst:.1e}")


def check_short_context(rng, cfg) -> CheckResult:
    worst = 0.0
    for L in (1, cfg.local_window // 2 + 1, cfg.local_window):
        q, k, v = (_rand(rng, cfg.n_heads, L, cfg.head_dim) for _ in range(3))
        out, _ = cca_heads(q, k, v, cfg)
        qr, kr = _rotated(q, k, cfg)
        worst = max(worst, np.abs(out - full_causal_attention(qr, kr, v)).max())
    return CheckResult("short_context_degenerates", worst <= 1e-10, f"max err {worst:.1e}")


def _expansion_case(rng, cfg, mode, L):
    c = replace(cfg, pooling_mode=mode)
    q, k, v = (_rand(rng, c.n_heads, L, c.head_dim) for _ in range(3))
    out, core = cca_heads(q, k, v, c)
    qr, kr = _rotated(q, k, c)
    ew = expand_weights(qr, kr, v, rotate_core_keys(core, c.rope), c)
    return q, k, v, out, core, ew


def _expansion_len(cfg):
    return cfg.local_window + 4 * cfg.group_size + 3


def check_expansion(rng, cfg, L=None) -> list[CheckResult]:
    L = L or _expansion_len(cfg)
    rows, recon, reach = [], [], []
    for mode in POOLING_MODES:
        _, _, v, out, _, ew = _expansion_case(rng, cfg, mode, L)
        rows.append(np.abs(ew.A.sum(-1) - 1).max())
        recon.append(np.abs(reconstruct_output(ew, v) - out).max())
        reach.append(all(reachability_report(_head(ew, h)).ok
                         for h in range(cfg.n_heads)))
    r_ok = reach[0] and reach[1] and not reach[2]
    return [
        CheckResult("expanded_rows_stochastic", max(rows) <= 1e-12,
                    "max |row sum - 1| " + ", ".join(f"{m}={e:.1e}" for m, e in zip(POOLING_MODES, rows))),
        CheckResult("expanded_reconstruction", max(recon) <= 1e-10,
                    "max |A.V - fused| " + ", ".join(f"{m}={e:.1e}" for m, e in zip(POOLING_MODES, recon))),
        CheckResult("reachability_by_mode", r_ok,
                    "reachable: " + ", ".join(f"{m}={ok}" for m, ok in zip(POOLING_MODES, reach))
                    + " (max mode is expected to fail)"),
    ]


def _head(ew, h):
    return ExpandedWeights(ew.A[h], ew.provenance[h], ew.structural_zero[h])


def check_linearity(rng, cfg) -> CheckResult:
    worst = 0.0
    L = 5 * cfg.group_size + 1
    g = cfg.group_size
    for mode in POOLING_MODES:
        q, k, v = (_rand(rng, cfg.n_heads, L, cfg.head_dim) for _ in range(3))
        qr, kr = _rotated(q, k, cfg)
        core = pool_core_tokens(qr, kr, k, v, g, mode)
        m = core.group_count
        for p in range(m):
            sl = slice(p * g, (p + 1) * g)
            ek = np.einsum("hg,hgd->hd", core.phi[:, p], k[:, sl]) - core.core_k[:, p]
            ev = np.einsum("hg,hgd->hd", core.phi[:, p], v[:, sl]) - core.core_v[:, p]
            worst = max(worst, np.abs(ek).max(), np.abs(ev).max())
    return CheckResult("pooling_linearity", worst <= 1e-12, f"max err {worst:.1e}")


def check_causality(rng, cfg, L=None) -> CheckResult:
    L = max(2, L or cfg.local_window + 3 * cfg.group_size + 5)
    q, k, v = (_rand(rng, cfg.n_heads, L, cfg.head_dim) for _ in range(3))
    base, _ = cca_heads(q, k, v, cfg)
    t = L // 2
    q2, k2, v2 = q.copy(), k.copy(), v.copy()
    for a in (q2, k2, v2):
        a[:, t:] += _rand(rng, cfg.n_heads, L - t, cfg.head_dim)
    pert, _ = cca_heads(q2, k2, v2, cfg)
    same = np.array_equal(base[:, :t], pert[:, :t])
    return CheckResult("causality", same, f"rows before {t + 1} bit-identical: {same}")


def _sweep_lengths(g, s):
    return sorted({1, g - 1, g, g + 1, s, s + g, 3 * (s + g)} - {0})


def check_streaming(rng, cfg) -> CheckResult:
    worst = 0.0
    g, s = cfg.group_size, cfg.local_window
    for L in _sweep_lengths(g, s):
        q, k, v = (_rand(rng, cfg.n_heads, L, cfg.head_dim) for _ in range(3))
        ref = DecodeCache(cfg).prefill(q, k, v)
        c = DecodeCache(cfg)
        rows = np.stack([c.append(q[:, t], k[:, t], v[:, t]) for t in range(L)], axis=1)
        worst = max(worst, np.abs(rows - ref).max())
    return CheckResult("streaming_equals_prefill", worst <= 1e-10,
                       f"max err {worst:.1e} over L in {_sweep_lengths(g, s)}")


def check_cache_accounting(rng, cfg) -> CheckResult:
    g, s = cfg.group_size, cfg.local_window
    bad = []
    for L in (0, 1, g, s, s + g + 1, 2 * (s + g) + 3):
        c = DecodeCache(cfg)
        q, k, v = (_rand(rng, cfg.n_heads, L, cfg.head_dim) for _ in range(3))
        c.prefill(q, k, v)
        st = c.stats()
        if (st.core_entries, st.raw_entries, st.pending_entries) != (L // g, min(L, s + g), L % g) \
                or st.kv_bytes != kv_bytes("cca", L, cfg):
            bad.append(L)
    return CheckResult("cache_accounting", not bad, f"mismatched L: {bad}" if bad else "exact")


def check_gradient(rng, cfg) -> CheckResult:
    acfg = AttentionConfig(group_size=2, local_window=2, pooling_mode="weighted",
                           rope_base=cfg.rope_base, rope_enabled=cfg.rope_enabled)
    mc = ModelConfig(vocab_size=11, d_model=8, n_layers=2, n_heads=2, head_dim=4,
                     mlp_hidden=12, attention=acfg, seed=3, init_scale=1.5)
    params = model_init(mc)
    ids = rng.integers(0, 11, size=12)
    _, grads = loss_and_grad(params, ids)
    worst = 0.0
    for name, val in params.tensors.items():
        coords = rng.choice(val.size, size=min(8, val.size), replace=False)

        def f(x, name=name):
            p = params.copy()
            p.tensors[name] = x
            return lm_loss(p, ids)
        fd = finite_diff_grad(f, val, 1e-5, coords).reshape(-1)[coords]
        an = grads[name].reshape(-1)[coords]
        worst = max(worst, float(np.max(gradient_rel_error(an, fd))))
    return CheckResult("gradient_vs_finite_diff", worst <= 1e-5, f"max rel err {worst:.1e}")


def gradient_rel_error(analytic, numeric, floor: float = 1e-7) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps exact-zero gradients from dividing by 0."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_flop_ledger(rng, cfg) -> CheckResult:
    c = replace(cfg, n_heads=1, rope_enabled=False)
    bad = []
    for L in (7, 33, 2 * (c.local_window + c.group_size) + 1):
        q, k, v = (_rand(rng, L, c.head_dim) for _ in range(3))
        _, counted = debug_cca_forward(q, k, v, c)
        if counted != flops_attention("cca", L, c):
            bad.append(L)
    return CheckResult("flop_ledger_matches_execution", not bad,
                       f"mismatched L: {bad}" if bad else "exact")


def check_sink_baseline(rng, cfg) -> CheckResult:
    L, n_sink, window = 16, 2, 2
    c = AttentionConfig(group_size=2, local_window=2, n_heads=1, head_dim=cfg.head_dim,
                        rope_enabled=False)
    q, k, v = (_rand(rng, L, c.head_dim) for _ in range(3))
    sink = reachability_report(sink_window_weights(q, k, n_sink, window))
    out, core = cca_heads(q[None], k[None], v[None], c)
    ew = expand_weights(q[None], k[None], v[None], core, c)
    cca = reachability_report(_head(ew, 0))
    return CheckResult("sink_window_unreachable_cca_reachable", (not sink.ok) and cca.ok,
                       f"sink violations {len(sink.violations)}, cca violations {len(cca.violations)}")


CHECKS: list[Callable] = [
    check_softmax, check_rope, check_oracle_g1, check_short_context, check_expansion,
    check_linearity, check_causality, check_streaming, check_cache_accounting,
    check_gradient, check_flop_ledger, check_sink_baseline,
]


def run_verify(cfg: AttentionConfig, seed: int = 0, seq_len: int | None = None) -> list[CheckResult]:
    """Run every check. ``seq_len`` sets the length of the expansion and causality cases."""
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []
    for check in CHECKS:
        try:
            if check in (check_expansion, check_causality):
                r = check(rng, cfg, seq_len)
            else:
                r = check(rng, cfg)
        except Exception as e:  # a crashing check is a failing check
            r = CheckResult(check.__name__.removeprefix("check_"), False, f"error: {e}")
        results.extend(r if isinstance(r, list) else [r])
    return results


def format_table(results: list[CheckResult]) -> str:
    w = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(w)}  result  detail", "-" * (w + 40)]
    for r in results:
        lines.append(f"{r.name.ljust(w)}  {'PASS' if r.passed else 'FAIL'}    {r.detail}")
    n = sum(r.passed for r in results)
    lines.append(f"{n}/{len(results)} checks passed")
    return "\n".join(lines)
