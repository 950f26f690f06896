"""Expanded token-to-token weights of CCA attention.

Each core-token weight is spread back over its group's raw tokens through the
pooling weights, giving an ordinary L x L causal weight matrix whose product
with V reproduces the fused output.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionConfig, CoreTokenSet, _check_core, cca_attention_probs

MAX_EXPAND_LEN = 4096
POSITIVE_FLOOR = 1e-300

NONE, GLOBAL, LOCAL = 0, 1, 2


@dataclass
class ExpandedWeights:
    A: np.ndarray           # (..., L, L)
    provenance: np.ndarray  # same shape, int8: NONE / GLOBAL / LOCAL
    structural_zero: np.ndarray = field(repr=False)  # True where zero by construction


def expand_weights(q, k, v, core: CoreTokenSet, config: AttentionConfig) -> ExpandedWeights:
    """Expanded weights for rotated ``q``/``k`` and a core set with rotated keys."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    if not (q.shape[-2] == k.shape[-2] == v.shape[-2]):
        raise ValueError("q, k, v must share the same row count")
    L = q.shape[-2]
    if L > MAX_EXPAND_LEN:
        raise ValueError(f"expansion is O(L^2); L={L} exceeds guard {MAX_EXPAND_LEN}")
    g, s = config.group_size, config.local_window
    _check_core(q, core, g, s)
    p_core, p_raw = cca_attention_probs(q, k, core.core_k, g, s)
    m = core.group_count
    lead = p_core.shape[:-1]
    # A[..., i, (p, r)] = p_core[..., i, p] * phi[..., p, r]
    spread = (p_core[..., :, :, None] * core.phi[..., None, :, :]).reshape(lead + (m * g,))
    A = p_raw.copy()
    A[..., : m * g] += spread

    j = np.maximum(0, (np.arange(1, L + 1) - s) // g)
    cols = np.arange(L)[None, :]
    rows = np.arange(L)[:, None]
    global_region = cols < (j * g)[:, None]
    local_region = (cols >= (j * g)[:, None]) & (cols <= rows)
    prov = np.where(global_region, GLOBAL, np.where(local_region, LOCAL, NONE)).astype(np.int8)
    prov = np.broadcast_to(prov, A.shape).copy()

    phi_flat = core.phi.reshape(core.phi.shape[:-2] + (m * g,))
    phi_cols = np.zeros(phi_flat.shape[:-1] + (L,))
    phi_cols[..., : m * g] = phi_flat
    structural = (prov == NONE) | ((prov == GLOBAL) & (phi_cols[..., None, :] == 0.0))
    return ExpandedWeights(A=A, provenance=prov, structural_zero=structural)


def reconstruct_output(expanded: ExpandedWeights, v) -> np.ndarray:
    """A @ V; equals the fused output because pooled values are phi-mixtures of V."""
    return expanded.A @ np.asarray(v)


@dataclass
class ReachabilityReport:
    ok: bool
    violations: list[tuple[int, int]]  # 1-indexed (i, t) with t <= i and A[i, t] not positive
    underflow: list[tuple[int, int]]   # subset of violations that are numeric, not structural


def reachability_report(weights, floor: float = POSITIVE_FLOOR) -> ReachabilityReport:
    """Check every earlier token carries positive weight into every later query.

    ``weights`` is an ExpandedWeights or a bare (L, L) matrix; for a bare
    matrix every failing entry counts as structural.
    """
    if isinstance(weights, ExpandedWeights):
        A, structural = weights.A, weights.structural_zero
    else:
        A = np.asarray(weights, dtype=np.float64)
        structural = None
    if A.ndim != 2:
        raise ValueError("reachability_report expects a single-head (L, L) matrix")
    L = A.shape[0]
    lower = np.tril(np.ones((L, L), dtype=bool))
    bad = lower & ~(A > floor)
    violations = [(int(i) + 1, int(t) + 1) for i, t in zip(*np.nonzero(bad))]
    if structural is None:
        underflow = []
    else:
        uf = bad & ~structural
        underflow = [(int(i) + 1, int(t) + 1) for i, t in zip(*np.nonzero(uf))]
    return ReachabilityReport(ok=not violations, violations=violations, underflow=underflow)
