"""Grouped core-token attention at desk scale: pooled core tokens for the
distant prefix, raw tokens for the local window, one fused causal softmax."""
from .attention import (AttentionConfig, CoreTokenSet, IndexPlan, ProjectionWeights,
                        fused_cca_attention, full_causal_attention, index_plan,
                        multi_head_cca, partition_groups, pool_core_tokens)
from .kv_cache import DecodeCache
from .model import ModelConfig, ModelParams, model_init

__all__ = [
    "AttentionConfig", "CoreTokenSet", "IndexPlan", "ProjectionWeights", "fused_cca_attention",
    "full_causal_attention", "index_plan", "multi_head_cca", "partition_groups",
    "pool_core_tokens", "DecodeCache", "ModelConfig", "ModelParams", "model_init",
]
