"""Byte-level decoder-only language model built from CCA attention blocks.

Block: x += Wo . CCA(RMSNorm(x)); x += MLP(RMSNorm(x)), GELU (tanh form).
Gradients are written out by hand, layer by layer, and run through RoPE,
the fused attention softmax and the group-pooling softmax.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Literal

import numpy as np

from .attention import (AttentionConfig, cca_attention_probs, causal_attention_probs,
                        group_middle_positions, merge_heads, pool_core_tokens,
                        split_heads)
from .kv_cache import DecodeCache
from .numerics import XorShift64Star, rope_rotate, seeded_init

TrainMode = Literal["full", "partial"]
ATTENTION_PROJECTIONS = ("wq", "wk", "wv")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    head_dim: int = 16
    mlp_hidden: int = 128
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    seed: int = 0
    init_scale: float = 1.0
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "head_dim", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model != self.n_heads * self.head_dim:
            raise ValueError(f"d_model ({self.d_model}) != n_heads * head_dim "
                             f"({self.n_heads} * {self.head_dim})")
        # head layout is owned by the model
        if (self.attention.n_heads, self.attention.head_dim) != (self.n_heads, self.head_dim):
            object.__setattr__(self, "attention", replace(
                self.attention, n_heads=self.n_heads, head_dim=self.head_dim))

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d, hd, f, V = self.d_model, self.n_heads * self.head_dim, self.mlp_hidden, self.vocab_size
        shapes = {"embed": (V, d)}
        for l in range(self.n_layers):
            p = f"layers.{l}."
            shapes.update({
                p + "norm1": (d,), p + "wq": (d, hd), p + "wk": (d, hd), p + "wv": (d, hd),
                p + "wo": (hd, d), p + "norm2": (d,), p + "w1": (d, f), p + "b1": (f,),
                p + "w2": (f, d), p + "b2": (d,),
            })
        shapes["norm_f"] = (d,)
        shapes["head"] = (d, V)
        return shapes


def param_group(name: str) -> str:
    """'attention' for the Q/K/V projections, 'other' for everything else."""
    return "attention" if name.rsplit(".", 1)[-1] in ATTENTION_PROJECTIONS else "other"


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def trainable_mask(self, mode: TrainMode = "full") -> dict[str, bool]:
        if mode == "full":
            return {k: True for k in self.tensors}
        if mode == "partial":
            return {k: param_group(k) == "attention" for k in self.tensors}
        raise ValueError(f"unknown training mode {mode!r}")


def model_init(config: ModelConfig) -> ModelParams:
    tensors = {}
    for idx, (name, shape) in enumerate(config.param_shapes().items()):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("norm"):
            tensors[name] = np.ones(shape)
        elif leaf.startswith("b"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = 1 if name == "embed" else shape[0]
            tensors[name] = seeded_init(shape, config.seed * 1_000_003 + idx,
                                        config.init_scale / math.sqrt(fan_in))
    return ModelParams(config, tensors)


# -- elementwise pieces -------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u ** 3))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _rms(x, gain, eps):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    n = x / r
    return n * gain, (n, r)


def _rms_back(dy, gain, cache):
    n, r = cache
    dgain = np.sum(dy * n, axis=0)
    dn = dy * gain
    dx = (dn - n * np.mean(dn * n, axis=-1, keepdims=True)) / r
    return dx, dgain


# -- attention block ----------------------------------------------------------

def _attn_forward(h, wq, wk, wv, wo, acfg: AttentionConfig, full: bool):
    H, L = acfg.n_heads, h.shape[0]
    rope, pos = acfg.rope, np.arange(L)
    xq, xk, xv = (split_heads(h @ w, H) for w in (wq, wk, wv))
    q, k = rope_rotate(xq, pos, rope), rope_rotate(xk, pos, rope)
    c = {"h": h, "xk": xk, "xv": xv, "q": q, "k": k}
    if full:
        P = causal_attention_probs(q, k)
        o = P @ xv
        c["P"] = P
    else:
        core = pool_core_tokens(q, k, xk, xv, acfg.group_size, acfg.pooling_mode)
        mid = group_middle_positions(core.group_count, acfg.group_size)
        ck = rope_rotate(core.core_k, mid, rope)
        pc, pr = cca_attention_probs(q, k, ck, acfg.group_size, acfg.local_window)
        o = pc @ core.core_v + pr @ xv
        c.update(phi=core.phi, cv=core.core_v, ck=ck, pc=pc, pr=pr, mid=mid)
    merged = merge_heads(o)
    c["merged"] = merged
    return merged @ wo, c


def _attn_backward(dout, wq, wk, wv, wo, acfg: AttentionConfig, full: bool, c):
    H, dh, g = acfg.n_heads, acfg.head_dim, acfg.group_size
    rope = acfg.rope
    scale = 1.0 / math.sqrt(dh)
    h, xk, xv, q, k = c["h"], c["xk"], c["xv"], c["q"], c["k"]
    L = h.shape[0]
    grads = {"wo": c["merged"].T @ dout}
    do = split_heads(dout @ wo.T, H)

    if full:
        P = c["P"]
        dP = do @ np.swapaxes(xv, -1, -2)
        dxv = np.swapaxes(P, -1, -2) @ do
        dS = P * (dP - np.sum(dP * P, axis=-1, keepdims=True))
        dq = dS @ k * scale
        dk = np.swapaxes(dS, -1, -2) @ q * scale
    else:
        phi, cv, ck, pc, pr = c["phi"], c["cv"], c["ck"], c["pc"], c["pr"]
        m = phi.shape[-2]
        dpc = do @ np.swapaxes(cv, -1, -2)
        dpr = do @ np.swapaxes(xv, -1, -2)
        dcv = np.swapaxes(pc, -1, -2) @ do
        dxv = np.swapaxes(pr, -1, -2) @ do
        dot = np.sum(dpc * pc, axis=-1, keepdims=True) + np.sum(dpr * pr, axis=-1, keepdims=True)
        dSc = pc * (dpc - dot)
        dSr = pr * (dpr - dot)
        dq = (dSc @ ck + dSr @ k) * scale
        dk = np.swapaxes(dSr, -1, -2) @ q * scale
        dck = rope_rotate(np.swapaxes(dSc, -1, -2) @ q * scale, c["mid"], rope, inverse=True)

        if m:
            mg = m * g
            kg_raw = xk[:, :mg].reshape(H, m, g, dh)
            vg = xv[:, :mg].reshape(H, m, g, dh)
            dxk_pool = np.einsum("hmg,hmd->hmgd", phi, dck).reshape(H, mg, dh)
            dxv[:, :mg] += np.einsum("hmg,hmd->hmgd", phi, dcv).reshape(H, mg, dh)
            if acfg.pooling_mode == "weighted":
                dphi = (np.einsum("hmd,hmgd->hmg", dck, kg_raw)
                        + np.einsum("hmd,hmgd->hmg", dcv, vg))
                dscore = phi * (dphi - np.sum(dphi * phi, axis=-1, keepdims=True)) * scale
                kg_rot = k[:, :mg].reshape(H, m, g, dh)
                q_last = q[:, g - 1: mg: g]
                dq[:, g - 1: mg: g] += np.einsum("hmg,hmgd->hmd", dscore, kg_rot)
                dk[:, :mg] += np.einsum("hmg,hmd->hmgd", dscore, q_last).reshape(H, mg, dh)
            # mean/max weights are constant w.r.t. the inputs (max is piecewise)
        else:
            dxk_pool = None

    pos = np.arange(L)
    dxq = rope_rotate(dq, pos, rope, inverse=True)
    dxk = rope_rotate(dk, pos, rope, inverse=True)
    if not full and dxk_pool is not None:
        dxk[:, : dxk_pool.shape[1]] += dxk_pool
    dxq, dxk, dxv = merge_heads(dxq), merge_heads(dxk), merge_heads(dxv)
    grads["wq"], grads["wk"], grads["wv"] = h.T @ dxq, h.T @ dxk, h.T @ dxv
    dh_in = dxq @ wq.T + dxk @ wk.T + dxv @ wv.T
    return dh_in, grads


# -- full model ---------------------------------------------------------------

def _check_ids(ids, V):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 1:
        raise ValueError("token ids must be a non-empty 1-D sequence")
    if ids.min() < 0 or ids.max() >= V:
        raise ValueError(f"token id out of range [0, {V})")
    return ids


def _forward(params: ModelParams, ids, acfg: AttentionConfig, full: bool, keep: bool):
    cfg, T = params.config, params.tensors
    eps = cfg.norm_eps
    x = T["embed"][ids]
    tape = []
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        h1, n1 = _rms(x, T[p + "norm1"], eps)
        att, ac = _attn_forward(h1, T[p + "wq"], T[p + "wk"], T[p + "wv"], T[p + "wo"], acfg, full)
        x = x + att
        h2, n2 = _rms(x, T[p + "norm2"], eps)
        u = h2 @ T[p + "w1"] + T[p + "b1"]
        a, t = _gelu(u)
        x = x + a @ T[p + "w2"] + T[p + "b2"]
        if keep:
            tape.append((n1, ac, n2, h2, u, t, a))
    hf, nf = _rms(x, T["norm_f"], eps)
    logits = hf @ T["head"]
    return logits, (tape, nf, hf)


def forward_lm(params: ModelParams, ids, attention: Literal["cca", "full"] = "cca",
               attention_config: AttentionConfig | None = None) -> np.ndarray:
    """Logits (L, vocab). ``attention='full'`` swaps in dense causal attention."""
    ids = _check_ids(ids, params.config.vocab_size)
    acfg = attention_config or params.config.attention
    logits, _ = _forward(params, ids, acfg, attention == "full", keep=False)
    return logits


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def lm_loss(params: ModelParams, ids, attention: Literal["cca", "full"] = "cca") -> float:
    ids = _check_ids(ids, params.config.vocab_size)
    if ids.size < 2:
        raise ValueError("need at least 2 tokens for a next-token loss")
    logp = _log_softmax(forward_lm(params, ids, attention)[:-1])
    return float(-np.mean(logp[np.arange(ids.size - 1), ids[1:]]))


def loss_and_grad(params: ModelParams, ids, mode: TrainMode = "full",
                  attention: Literal["cca", "full"] = "cca"):
    """Mean next-token cross-entropy and its gradient for every parameter.

    Frozen parameters (per ``mode``) get exact zeros.
    """
    cfg, T = params.config, params.tensors
    ids = _check_ids(ids, cfg.vocab_size)
    n = ids.size - 1
    if n < 1:
        raise ValueError("need at least 2 tokens for a next-token loss")
    acfg = cfg.attention
    full = attention == "full"
    logits, (tape, nf, hf) = _forward(params, ids, acfg, full, keep=True)

    logp = _log_softmax(logits[:-1])
    loss = float(-np.mean(logp[np.arange(n), ids[1:]]))
    dlogits = np.zeros_like(logits)
    dlogits[:-1] = np.exp(logp)
    dlogits[np.arange(n), ids[1:]] -= 1.0
    dlogits /= n

    grads = {"head": hf.T @ dlogits}
    dx, grads["norm_f"] = _rms_back(dlogits @ T["head"].T, T["norm_f"], nf)
    for l in reversed(range(cfg.n_layers)):
        p = f"layers.{l}."
        n1, ac, n2, h2, u, t, a = tape[l]
        # MLP branch
        grads[p + "b2"] = dx.sum(axis=0)
        grads[p + "w2"] = a.T @ dx
        du = (dx @ T[p + "w2"].T) * _gelu_grad(u, t)
        grads[p + "b1"] = du.sum(axis=0)
        grads[p + "w1"] = h2.T @ du
        dxn, grads[p + "norm2"] = _rms_back(du @ T[p + "w1"].T, T[p + "norm2"], n2)
        dx = dx + dxn
        # attention branch
        dh1, ag = _attn_backward(dx, T[p + "wq"], T[p + "wk"], T[p + "wv"], T[p + "wo"],
                                 acfg, full, ac)
        for key, val in ag.items():
            grads[p + key] = val
        dxn, grads[p + "norm1"] = _rms_back(dh1, T[p + "norm1"], n1)
        dx = dx + dxn
    demb = np.zeros_like(T["embed"])
    np.add.at(demb, ids, dx)
    grads["embed"] = demb

    mask = params.trainable_mask(mode)
    out = {}
    for name in T:
        out[name] = grads[name] if mask[name] else np.zeros_like(T[name])
    return loss, out


# -- training -----------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


@dataclass
class TrainLog:
    mode: str
    lr: float
    losses: list[float] = field(default_factory=list)


def sample_windows(corpus: bytes, seq_len: int, batch: int, rng: XorShift64Star) -> list[np.ndarray]:
    span = len(corpus) - seq_len
    if span < 1:
        raise ValueError(f"corpus of {len(corpus)} bytes is too short for seq_len={seq_len}")
    out = []
    for _ in range(batch):
        off = rng.next_u64() % span
        out.append(np.frombuffer(corpus, dtype=np.uint8, count=seq_len, offset=off).astype(np.int64))
    return out


def train(params: ModelParams, corpus: bytes, steps: int, lr: float,
          mode: TrainMode = "full", seq_len: int = 64, batch_size: int = 4,
          seed: int | None = None, log_every: int = 0) -> TrainLog:
    """Plain SGD, in place. Returns the per-step mean batch loss."""
    if not corpus:
        raise ValueError("empty corpus")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    params.trainable_mask(mode)  # validates mode
    rng = XorShift64Star(params.config.seed if seed is None else seed)
    log = TrainLog(mode=mode, lr=lr)
    for step in range(steps):
        batch = sample_windows(corpus, seq_len, batch_size, rng)
        total = 0.0
        acc = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        for ids in batch:
            loss, grads = loss_and_grad(params, ids, mode)
            total += loss
            for k, gk in grads.items():
                acc[k] += gk
        loss = total / len(batch)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        for k, gk in acc.items():
            params.tensors[k] -= (lr / len(batch)) * gk
        log.losses.append(loss)
        if log_every and step % log_every == 0:
            print(f"step {step:5d}  loss {loss:.4f}")
    return log


# -- generation ---------------------------------------------------------------

def _mlp(x, T, p, eps):
    h2, _ = _rms(x, T[p + "norm2"], eps)
    a, _ = _gelu(h2 @ T[p + "w1"] + T[p + "b1"])
    return x + a @ T[p + "w2"] + T[p + "b2"]


def _decode_layers(params: ModelParams, x, caches: list[DecodeCache], prefill: bool):
    cfg, T = params.config, params.tensors
    H, dh = cfg.n_heads, cfg.head_dim
    for l, cache in enumerate(caches):
        p = f"layers.{l}."
        h1, _ = _rms(x, T[p + "norm1"], cfg.norm_eps)
        if prefill:
            o = cache.prefill(*(split_heads(h1 @ T[p + w], H) for w in ATTENTION_PROJECTIONS))
            att = merge_heads(o)
        else:
            rows = [(h1 @ T[p + w]).reshape(H, dh) for w in ATTENTION_PROJECTIONS]
            att = cache.append(*rows).reshape(1, H * dh)
        x = _mlp(x + att @ T[p + "wo"], T, p, cfg.norm_eps)
    hf, _ = _rms(x, T["norm_f"], cfg.norm_eps)
    return hf[-1] @ T["head"]


def generate(params: ModelParams, prompt: Iterable[int], n_new: int,
             group_size: int | None = None, local_window: int | None = None) -> list[int]:
    """Greedy decoding through per-layer CCA caches; (g, s) may differ from training."""
    ids = [int(t) for t in prompt]
    if not ids:
        raise ValueError("prompt must be non-empty")
    _check_ids(ids, params.config.vocab_size)
    if n_new <= 0:
        return ids
    acfg = params.config.attention.with_geometry(group_size, local_window)
    caches = [DecodeCache(acfg) for _ in range(params.config.n_layers)]
    logits = _decode_layers(params, params.tensors["embed"][np.asarray(ids)], caches, True)
    for step in range(n_new):
        nxt = int(np.argmax(logits))
        ids.append(nxt)
        if step + 1 < n_new:
            logits = _decode_layers(params, params.tensors["embed"][[nxt]], caches, False)
    return ids


def generate_uncached(params: ModelParams, prompt: Iterable[int], n_new: int,
                      group_size: int | None = None, local_window: int | None = None) -> list[int]:
    """Reference decoder: recompute the whole prefix every step."""
    ids = [int(t) for t in prompt]
    acfg = params.config.attention.with_geometry(group_size, local_window)
    for _ in range(max(0, n_new)):
        ids.append(int(np.argmax(forward_lm(params, ids, attention_config=acfg)[-1])))
    return ids
