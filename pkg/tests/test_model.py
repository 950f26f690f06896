import json
import math
import struct

import numpy as np
import pytest

from cca_attention.attention import AttentionConfig
from cca_attention.checkpoint import (CheckpointError, checkpoint_load, checkpoint_save,
                                      read_manifest)
from cca_attention.config import bundled_corpus
from cca_attention.model import (ModelConfig, TrainingDiverged, forward_lm, generate,
                                 generate_uncached, lm_loss, loss_and_grad, model_init,
                                 param_group, train)
from cca_attention.numerics import finite_diff_grad
from cca_attention.verify import gradient_rel_error


def tiny(g=2, s=3, rope=True, seed=0, mode="weighted", vocab=16, **kw):
    att = AttentionConfig(group_size=g, local_window=s, rope_enabled=rope, pooling_mode=mode)
    return model_init(ModelConfig(vocab_size=vocab, d_model=8, n_layers=2, n_heads=2, head_dim=4,
                                  mlp_hidden=12, attention=att, seed=seed, **kw))


def ids_of(rng, L, vocab=16):
    return rng.integers(0, vocab, L)


def test_init_is_deterministic():
    a, b = tiny(), tiny()
    assert all(a.tensors[k].tobytes() == b.tensors[k].tobytes() for k in a.tensors)


def test_init_logits_finite_and_seed_dependent(rng):
    ids = ids_of(rng, 20)
    p = tiny()
    assert np.all(np.isfinite(forward_lm(p, ids)))
    assert lm_loss(p, ids) != lm_loss(tiny(seed=1), ids)


def test_config_validation():
    with pytest.raises(ValueError, match="d_model"):
        ModelConfig(d_model=10, n_heads=4, head_dim=4)
    with pytest.raises(ValueError):
        ModelConfig(n_layers=0)
    c = ModelConfig(d_model=8, n_heads=2, head_dim=4)
    assert (c.attention.n_heads, c.attention.head_dim) == (2, 4)


def test_forward_causal(rng):
    p = tiny()
    ids = ids_of(rng, 17)
    base = forward_lm(p, ids)
    for t in (1, 6, 16):
        alt = ids.copy()
        alt[t:] = (alt[t:] + 5) % 16
        assert np.array_equal(forward_lm(p, alt)[:t], base[:t])


def test_first_row_depends_on_first_token_only(rng):
    p = tiny()
    row = forward_lm(p, [3])[0]
    q = p.copy()
    others = np.arange(16) != 3
    q.tensors["embed"][others] = rng.standard_normal((15, 8))
    np.testing.assert_array_equal(forward_lm(q, [3])[0], row)
    # longer inputs change matmul shapes, so only reduction-order noise is allowed
    np.testing.assert_allclose(forward_lm(p, [3, 9, 1])[0], row, rtol=0, atol=1e-13)


def test_g1_matches_full_attention(rng):
    p = tiny(g=1, s=2, rope=False)
    ids = ids_of(rng, 25)
    assert np.max(np.abs(forward_lm(p, ids) - forward_lm(p, ids, "full"))) <= 1e-8


def test_uniform_logits_loss_is_log_vocab(rng):
    p = tiny()
    p.tensors["head"][:] = 0.0
    assert abs(lm_loss(p, ids_of(rng, 12)) - math.log(16)) <= 1e-9


def test_out_of_range_ids():
    p = tiny()
    with pytest.raises(ValueError):
        forward_lm(p, [0, 16])
    with pytest.raises(ValueError):
        loss_and_grad(p, [1])


@pytest.mark.parametrize("mode", ["weighted", "mean", "max"])
def test_gradient_sampled(rng, mode):
    # L=12 with g=2, s=2 puts the pooling softmax on the gradient path
    p = tiny(g=2, s=2, mode=mode, init_scale=1.5)
    ids = ids_of(rng, 12)
    _, grads = loss_and_grad(p, ids)
    worst = 0.0
    for name, arr in p.tensors.items():
        coords = rng.choice(arr.size, size=min(6, arr.size), replace=False)

        def f(x, name=name):
            q = p.copy()
            q.tensors[name] = x.reshape(arr.shape)
            return lm_loss(q, ids)
        num = finite_diff_grad(f, arr.ravel().copy(), 1e-5, coords)[coords]
        worst = max(worst, float(gradient_rel_error(grads[name].ravel()[coords], num).max()))
    assert worst <= 1e-5


def test_partial_mode_zero_frozen_grads(rng):
    p = tiny()
    _, grads = loss_and_grad(p, ids_of(rng, 10), mode="partial")
    for name, g in grads.items():
        if param_group(name) == "attention":
            assert np.any(g != 0)
        else:
            assert not np.any(g)


def test_full_loss_matches_gradient_loss(rng):
    p = tiny()
    ids = ids_of(rng, 10)
    assert loss_and_grad(p, ids)[0] == lm_loss(p, ids)


CORPUS = bundled_corpus()[:4000]


def test_train_lr_zero_leaves_params():
    p = tiny(vocab=256)
    before = {k: v.copy() for k, v in p.tensors.items()}
    log = train(p, CORPUS, steps=3, lr=0.0, seq_len=8, batch_size=1, seed=5)
    assert log.losses == train(p, CORPUS, steps=3, lr=0.0, seq_len=8, batch_size=1,
                               seed=5).losses
    assert all(np.array_equal(before[k], p.tensors[k]) for k in before)


def test_train_lr_zero_fixed_window_constant():
    p = tiny(vocab=256)
    text = b"abcdefghij"  # span 1: every window is the same
    log = train(p, text, steps=4, lr=0.0, seq_len=9, batch_size=1)
    assert len(set(log.losses)) == 1


def test_partial_training_freezes_embedding():
    p = tiny(vocab=256)
    emb = p.tensors["embed"].copy()
    wq = p.tensors["layers.0.wq"].copy()
    train(p, CORPUS, steps=2, lr=0.5, mode="partial", seq_len=8, batch_size=2)
    assert p.tensors["embed"].tobytes() == emb.tobytes()
    assert not np.array_equal(p.tensors["layers.0.wq"], wq)


def test_training_deterministic():
    logs = []
    for _ in range(2):
        p = tiny(vocab=256)
        logs.append(train(p, CORPUS, steps=3, lr=0.3, seq_len=8, batch_size=2, seed=1).losses)
    assert logs[0] == logs[1]


def test_training_diverges_loudly():
    p = tiny(vocab=256)
    p.tensors["head"][0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as exc:
        train(p, CORPUS, steps=2, lr=0.1, seq_len=8, batch_size=1)
    assert exc.value.step == 0


def test_train_argument_errors():
    p = tiny(vocab=256)
    with pytest.raises(ValueError):
        train(p, b"", 1, 0.1)
    with pytest.raises(ValueError):
        train(p, CORPUS, 0, 0.1)
    with pytest.raises(ValueError):
        train(p, CORPUS, 1, 0.1, mode="half")


@pytest.mark.parametrize("g,s", [(2, 3), (4, 8), (1, 1)])
def test_cached_generation_matches_uncached(rng, g, s):
    p = tiny(g=g, s=s, init_scale=2.0)
    prompt = list(ids_of(rng, 5))
    assert generate(p, prompt, 14) == generate_uncached(p, prompt, 14)


def test_generation_runtime_override(rng):
    p = tiny(init_scale=2.0)
    prompt = list(ids_of(rng, 4))
    a = generate(p, prompt, 6, group_size=2, local_window=3)
    b = generate(p, prompt, 6, group_size=8, local_window=5)
    assert len(a) == len(b) == 10
    assert a == generate_uncached(p, prompt, 6, 2, 3)
    # L <= s for both geometries: global branch unused, outputs agree
    c = generate(p, prompt, 6, group_size=2, local_window=16)
    d = generate(p, prompt, 6, group_size=8, local_window=16)
    assert c == d


def test_generation_edge_cases():
    p = tiny()
    assert generate(p, [1, 2, 3], 0) == [1, 2, 3]
    with pytest.raises(ValueError):
        generate(p, [], 3)


def test_checkpoint_roundtrip(tmp_path, rng):
    p = tiny(vocab=256)
    train(p, CORPUS, steps=1, lr=0.1, seq_len=8, batch_size=1)
    path = tmp_path / "m.ckpt"
    checkpoint_save(p, path)
    q = checkpoint_load(path)
    assert q.config == p.config
    assert all(q.tensors[k].tobytes() == p.tensors[k].tobytes() for k in p.tensors)
    ids = ids_of(rng, 9, 256)
    assert forward_lm(q, ids).tobytes() == forward_lm(p, ids).tobytes()
    manifest, start = read_manifest(path)
    n_values = sum(math.prod(s) for s in p.config.param_shapes().values())
    assert path.stat().st_size - start == manifest["payload_bytes"] == 8 * n_values


def _rewrite_manifest(path, edit):
    manifest, start = read_manifest(path)
    payload = path.read_bytes()[start:]
    edit(manifest)
    head = json.dumps(manifest).encode()
    path.write_bytes(struct.pack("<Q", len(head)) + head + payload)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    checkpoint_save(tiny(), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint_load(path)
    path.write_bytes(raw[:5])
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint_load(path)


def test_checkpoint_wrong_shape(tmp_path):
    path = tmp_path / "m.ckpt"
    checkpoint_save(tiny(), path)

    def swap(m):
        e = next(e for e in m["tensors"] if e["name"] == "embed")
        e["shape"] = e["shape"][::-1]
    _rewrite_manifest(path, swap)
    with pytest.raises(CheckpointError, match="shape mismatch for embed"):
        checkpoint_load(path)


def test_checkpoint_wrong_version(tmp_path):
    path = tmp_path / "m.ckpt"
    checkpoint_save(tiny(), path)
    _rewrite_manifest(path, lambda m: m.update(format_version=99))
    with pytest.raises(CheckpointError, match="version"):
        checkpoint_load(path)
