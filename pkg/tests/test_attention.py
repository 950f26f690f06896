import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cca_attention.attention import (AttentionConfig, CoreTokenSet, ProjectionWeights,
                                     cca_attention_probs, cca_heads, full_causal_attention,
                                     fused_cca_attention, group_middle_positions, index_plan,
                                     merge_heads, multi_head_cca, multi_head_full,
                                     partition_groups, pool_core_tokens, pooling_weights,
                                     rotate_core_keys, split_heads)
from cca_attention.numerics import RopeParams, rope_rotate
from oracles import naive_causal_attention, naive_cca, naive_pool


def norope(g, s, dh=8, heads=1, mode="weighted"):
    return AttentionConfig(group_size=g, local_window=s, n_heads=heads, head_dim=dh,
                           rope_enabled=False, pooling_mode=mode)


def single_head(q, k, v, cfg):
    core = pool_core_tokens(q, k, k, v, cfg.group_size, cfg.pooling_mode)
    return fused_cca_attention(q, k, v, core, cfg)


# -- partition and index plan -------------------------------------------------

def test_partition_examples():
    p = partition_groups(10, 4)
    assert (p.group_count, p.groups, p.trailing) == (2, [(1, 4), (5, 8)], (9, 10))
    p = partition_groups(4, 4)
    assert (p.group_count, p.groups, p.trailing) == (1, [(1, 4)], None)
    p = partition_groups(3, 4)
    assert (p.group_count, p.groups, p.trailing) == (0, [], (1, 3))
    with pytest.raises(ValueError):
        partition_groups(5, 0)


@pytest.mark.parametrize("i,g,s,expect", [
    (11, 4, 2, (2, 9, 3)),
    (5, 4, 2, (0, 1, 5)),
    (500, 16, 1024, (0, 1, 500)),
])
def test_index_plan_examples(i, g, s, expect):
    p = index_plan(i, g, s)
    assert (p.global_end, p.local_start, p.window_len) == expect


def test_index_plan_rejects_position_zero():
    with pytest.raises(ValueError):
        index_plan(0, 4, 2)


@given(st.integers(1, 16), st.integers(1, 40), st.integers(1, 300))
def test_index_plan_properties(g, s, i):
    p, nxt = index_plan(i, g, s), index_plan(i + 1, g, s)
    assert p.local_start == p.global_end * g + 1
    assert p.window_len == i - p.global_end * g
    assert nxt.global_end >= p.global_end and nxt.local_start >= p.local_start
    if i > s:
        assert p.window_len == s + (i - s) % g
        assert s <= p.window_len <= s + g - 1
    else:
        assert (p.global_end, p.local_start, p.window_len) == (0, 1, i)
    if i < g + s:
        assert p.global_end == 0


def test_group_middle_positions():
    # 0-indexed: token 8 of a 16-token group is index 7
    np.testing.assert_array_equal(group_middle_positions(3, 16), [7, 23, 39])
    np.testing.assert_array_equal(group_middle_positions(2, 3), [1, 4])
    np.testing.assert_array_equal(group_middle_positions(2, 1), [0, 1])


# -- pooling ------------------------------------------------------------------

def test_pool_g1_is_identity(rng):
    q, k, v = rng.standard_normal((3, 7, 8))
    core = pool_core_tokens(q, k, k, v, 1)
    np.testing.assert_array_equal(core.phi, np.ones((7, 1)))
    np.testing.assert_array_equal(core.core_k, k)
    np.testing.assert_array_equal(core.core_v, v)


@pytest.mark.parametrize("mode", ["weighted", "mean", "max"])
def test_pool_identical_tokens(rng, mode):
    row_k, row_v = rng.standard_normal(8), rng.standard_normal(8)
    k = np.tile(row_k, (8, 1))
    v = np.tile(row_v, (8, 1))
    core = pool_core_tokens(rng.standard_normal((8, 8)), k, k, v, 4, mode)
    np.testing.assert_allclose(core.core_k, np.tile(row_k, (2, 1)), rtol=0, atol=1e-15)
    np.testing.assert_allclose(core.core_v, np.tile(row_v, (2, 1)), rtol=0, atol=1e-15)


def test_pool_matches_naive(rng):
    L, g = 13, 4
    q, k, v = rng.standard_normal((3, L, 8))
    core = pool_core_tokens(q, k, k, v, g)
    assert core.group_count == 3
    for p in range(3):
        rows = list(range(p * g, (p + 1) * g))
        phi = naive_pool(q, k, rows, rows[-1])
        np.testing.assert_allclose(core.phi[p], phi, rtol=0, atol=1e-15)
        np.testing.assert_allclose(core.core_k[p], sum(w * k[r] for w, r in zip(phi, rows)),
                                   rtol=0, atol=1e-12)


@given(st.integers(1, 6), st.integers(0, 30), st.sampled_from(["weighted", "mean", "max"]),
       st.integers(0, 2 ** 32 - 1))
@settings(max_examples=60, deadline=None)
def test_pooling_simplex(g, L, mode, seed):
    rng = np.random.default_rng(seed)
    q, k = rng.standard_normal((2, L, 4))
    phi = pooling_weights(q, k, g, mode)
    assert phi.shape == (L // g, g)
    np.testing.assert_allclose(phi.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    if mode == "weighted":
        assert np.all(phi > 0)
    elif mode == "mean":
        assert np.all(phi == 1.0 / g)
    else:
        assert np.all((phi == 0) | (phi == 1))


@pytest.mark.parametrize("mode", ["weighted", "mean", "max"])
def test_linearity_identity(rng, mode):
    # pooled keys/values equal phi applied to the raw rows, per head
    H, L, g, dh = 2, 22, 4, 8
    xq, xk, xv = rng.standard_normal((3, H, L, dh))
    _, core = cca_heads(xq, xk, xv, AttentionConfig(group_size=g, local_window=4, n_heads=H,
                                                    head_dim=dh, pooling_mode=mode))
    m = L // g
    Kg = xk[:, : m * g].reshape(H, m, g, dh)
    Vg = xv[:, : m * g].reshape(H, m, g, dh)
    for h in range(H):
        for p in range(m):
            np.testing.assert_allclose(core.core_k[h, p], core.phi[h, p] @ Kg[h, p], atol=1e-12)
            np.testing.assert_allclose(core.core_v[h, p], core.phi[h, p] @ Vg[h, p], atol=1e-12)


def test_pool_row_mismatch():
    with pytest.raises(ValueError):
        pool_core_tokens(np.ones((4, 2)), np.ones((4, 2)), np.ones((3, 2)), np.ones((4, 2)), 2)


# -- fused attention ----------------------------------------------------------

def test_full_attention_matches_naive(rng):
    q, k, v = rng.standard_normal((3, 8, 8))
    np.testing.assert_allclose(full_causal_attention(q, k, v), naive_causal_attention(q, k, v),
                               rtol=0, atol=1e-12)


def test_full_attention_trivial_cases(rng):
    v = rng.standard_normal((5, 4))
    k = np.tile(rng.standard_normal(4), (5, 1))
    out = full_causal_attention(rng.standard_normal((5, 4)), k, v)
    np.testing.assert_allclose(out, np.cumsum(v, axis=0) / np.arange(1, 6)[:, None], atol=1e-14)
    np.testing.assert_allclose(full_causal_attention(v[:1], v[:1], v[:1]), v[:1], atol=0)


@pytest.mark.parametrize("g,s,L", [(4, 8, 40), (3, 5, 31), (2, 1, 17), (5, 2, 12)])
def test_fused_matches_naive_cca(rng, g, s, L):
    q, k, v = rng.standard_normal((3, L, 8))
    np.testing.assert_allclose(single_head(q, k, v, norope(g, s)), naive_cca(q, k, v, g, s),
                               rtol=0, atol=1e-12)


@pytest.mark.parametrize("s", [1, 3, 40])
def test_g1_equals_full(rng, s):
    q, k, v = rng.standard_normal((3, 32, 8))
    np.testing.assert_allclose(single_head(q, k, v, norope(1, s)), full_causal_attention(q, k, v),
                               rtol=0, atol=1e-10)


@pytest.mark.parametrize("g", [2, 4, 16])
def test_short_context_equals_full(rng, g):
    q, k, v = rng.standard_normal((3, 20, 8))
    np.testing.assert_allclose(single_head(q, k, v, norope(g, 20)),
                               full_causal_attention(q, k, v), rtol=0, atol=1e-10)


def test_single_token(rng):
    q, k, v = rng.standard_normal((3, 1, 8))
    np.testing.assert_allclose(single_head(q, k, v, norope(4, 2)), v, atol=1e-15)


def test_blocked_path_matches_dense(rng):
    q, k, v = rng.standard_normal((3, 2, 70, 8))
    cfg = norope(4, 6)
    core = pool_core_tokens(q, k, k, v, 4)
    small = fused_cca_attention(q, k, v, core, cfg, block=16)
    big = fused_cca_attention(q, k, v, core, cfg, block=1024)
    pc, pr = cca_attention_probs(q, k, core.core_k, 4, 6)
    dense = pc @ core.core_v + pr @ v
    np.testing.assert_allclose(small, big, rtol=0, atol=1e-13)
    np.testing.assert_allclose(small, dense, rtol=0, atol=1e-13)


def test_attention_rows_are_distributions(rng):
    q, k = rng.standard_normal((2, 45, 8)) * 3
    core = pool_core_tokens(q, k, k, k, 4)
    pc, pr = cca_attention_probs(q, k, core.core_k, 4, 8)
    np.testing.assert_allclose(pc.sum(-1) + pr.sum(-1), 1.0, rtol=0, atol=1e-12)
    for i in range(45):
        j = max(0, (i + 1 - 8) // 4)
        assert np.all(pc[i, :j] > 0) and np.all(pc[i, j:] == 0)
        assert np.all(pr[i, j * 4: i + 1] > 0)
        assert np.all(pr[i, : j * 4] == 0) and np.all(pr[i, i + 1:] == 0)


@given(st.integers(1, 5), st.integers(1, 8), st.integers(2, 30), st.data())
@settings(max_examples=40, deadline=None)
def test_causality(g, s, L, data):
    seed = data.draw(st.integers(0, 2 ** 32 - 1))
    t = data.draw(st.integers(1, L - 1))
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(group_size=g, local_window=s, n_heads=2, head_dim=4)
    xq, xk, xv = rng.standard_normal((3, 2, L, 4))
    base, _ = cca_heads(xq, xk, xv, cfg)
    for x in (xq, xk, xv):
        x[:, t:] += rng.standard_normal(x[:, t:].shape)
    pert, _ = cca_heads(xq, xk, xv, cfg)
    assert np.array_equal(base[:, :t], pert[:, :t])


def test_core_mismatch_errors(rng):
    q, k, v = rng.standard_normal((3, 20, 8))
    core = pool_core_tokens(q, k, k, v, 2)
    with pytest.raises(ValueError, match="g=2"):
        fused_cca_attention(q, k, v, core, norope(4, 4))
    short = CoreTokenSet(core.phi[:1], core.core_k[:1], core.core_v[:1], 2)
    with pytest.raises(ValueError, match="core tokens"):
        fused_cca_attention(q, k, v, short, norope(2, 4))


# -- RoPE handling and multi-head composition ---------------------------------

def test_core_keys_rotated_at_group_middle(rng):
    H, L, g, dh = 1, 12, 4, 8
    xq, xk, xv = rng.standard_normal((3, H, L, dh))
    cfg = AttentionConfig(group_size=g, local_window=4, n_heads=H, head_dim=dh)
    _, core = cca_heads(xq, xk, xv, cfg)
    rot = rotate_core_keys(core, cfg.rope)
    for p, pos in enumerate([1, 5, 9]):
        np.testing.assert_allclose(rot.core_k[0, p],
                                   rope_rotate(core.core_k[0, p][None], [pos], cfg.rope)[0],
                                   atol=1e-15)
    # pooling scores see rotated q/k at true positions
    pos = np.arange(L)
    qr = rope_rotate(xq[0], pos, cfg.rope)
    kr = rope_rotate(xk[0], pos, cfg.rope)
    for p in range(3):
        rows = list(range(p * g, (p + 1) * g))
        np.testing.assert_allclose(core.phi[0, p], naive_pool(qr, kr, rows, rows[-1]), atol=1e-14)


def test_heads_are_independent(rng):
    cfg = AttentionConfig(group_size=3, local_window=4, n_heads=3, head_dim=8)
    xq, xk, xv = rng.standard_normal((3, 3, 25, 8))
    out, _ = cca_heads(xq, xk, xv, cfg)
    one = AttentionConfig(group_size=3, local_window=4, n_heads=1, head_dim=8)
    for h in range(3):
        single, _ = cca_heads(xq[h:h + 1], xk[h:h + 1], xv[h:h + 1], one)
        np.testing.assert_allclose(out[h], single[0], rtol=0, atol=1e-15)


def _weights(rng, d, hd):
    return ProjectionWeights(*(rng.standard_normal(sh) * 0.3
                               for sh in ((d, hd), (d, hd), (d, hd), (hd, d))))


def test_multi_head_g1_composition(rng):
    d, L = 8, 20
    W = _weights(rng, d, 8)
    X = rng.standard_normal((L, d))
    cfg = norope(1, 3, dh=8, heads=1)
    ref = full_causal_attention(X @ W.wq, X @ W.wk, X @ W.wv) @ W.wo
    np.testing.assert_allclose(multi_head_cca(X, W, cfg), ref, rtol=0, atol=1e-10)
    np.testing.assert_array_equal(multi_head_cca(X, W, cfg), multi_head_cca(X, W, cfg))


def test_multi_head_short_context_independent_of_g(rng):
    d, L = 16, 24
    W = _weights(rng, d, 16)
    X = rng.standard_normal((L, d))
    outs = [multi_head_cca(X, W, norope(g, 32, dh=4, heads=4)) for g in (1, 2, 4, 8, 16)]
    for o in outs[1:]:
        np.testing.assert_array_equal(o, outs[0])
    np.testing.assert_allclose(outs[0], multi_head_full(X, W, norope(4, 32, dh=4, heads=4)),
                               rtol=0, atol=1e-12)


def test_multi_head_shape_errors(rng):
    W = _weights(rng, 8, 8)
    with pytest.raises(ValueError, match="wq"):
        multi_head_cca(np.ones((4, 8)), W, AttentionConfig(n_heads=2, head_dim=8))


def test_split_merge_roundtrip(rng):
    x = rng.standard_normal((5, 12))
    assert split_heads(x, 3).shape == (3, 5, 4)
    np.testing.assert_array_equal(merge_heads(split_heads(x, 3)), x)


def test_config_validation():
    for kw in ({"group_size": 0}, {"local_window": 0}, {"pooling_mode": "sum"},
               {"head_dim": 5}):
        with pytest.raises(ValueError):
            AttentionConfig(**kw)
    ps = AttentionConfig.long_context()
    assert (ps.group_size, ps.local_window) == (16, 1024)
    assert AttentionConfig().with_geometry(2).group_size == 2
    assert isinstance(AttentionConfig().rope, RopeParams)
    assert math.isclose(AttentionConfig(head_dim=4, rope_base=100.0).rope.inv_freq()[1], 0.1)
