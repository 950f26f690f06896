"""JSON run configuration for the command line.

Every section is optional; unknown keys anywhere are rejected.

    {
      "seed": 0,
      "model":     {"vocab_size": 256, "d_model": 64, "n_layers": 2, "n_heads": 4,
                    "head_dim": 16, "mlp_hidden": 128, "init_scale": 1.0},
      "attention": {"g": 4, "s": 64, "pooling_mode": "weighted",
                    "rope": {"enabled": true, "base": 10000.0}},
      "bench":     {"lengths": [...], "variants": ["full", "cca"], "repeats": 5, ...},
      "train":     {"steps": 200, "lr": 0.3, "mode": "full", "corpus": null, ...},
      "generate":  {"prompt": "The ", "n_new": 64, "g_override": null,
                    "s_override": null, "checkpoint": "model.ckpt"}
    }
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib.resources import files
from pathlib import Path

from .attention import AttentionConfig
from .bench import MODES, VARIANTS
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class RopeSection:
    enabled: bool = True
    base: float = 10000.0


@dataclass
class AttentionSection:
    g: int = 4
    s: int = 64
    pooling_mode: str = "weighted"
    rope: RopeSection = field(default_factory=RopeSection)


@dataclass
class ModelSection:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    head_dim: int = 16
    mlp_hidden: int = 128
    init_scale: float = 1.0


@dataclass
class BenchSection:
    lengths: list[int] = field(default_factory=lambda: [1024, 2048, 4096, 8192, 16384])
    variants: list[str] = field(default_factory=lambda: ["full", "cca"])
    modes: list[str] = field(default_factory=lambda: ["prefill", "decode_per_token"])
    repeats: int = 5
    warmup: int = 1
    fixed_groups: int | None = None
    n_sink: int = 4
    sink_window: int | None = None
    float32: bool = False


@dataclass
class TrainSection:
    steps: int = 200
    lr: float = 0.3
    mode: str = "full"
    corpus: str | None = None  # None -> bundled corpus
    seq_len: int = 64
    batch_size: int = 4
    checkpoint: str = "model.ckpt"


@dataclass
class GenerateSection:
    prompt: str = "The "
    n_new: int = 64
    g_override: int | None = None
    s_override: int | None = None
    checkpoint: str = "model.ckpt"


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    attention: AttentionSection = field(default_factory=AttentionSection)
    bench: BenchSection = field(default_factory=BenchSection)
    train: TrainSection = field(default_factory=TrainSection)
    generate: GenerateSection = field(default_factory=GenerateSection)

    def attention_config(self) -> AttentionConfig:
        a = self.attention
        return AttentionConfig(group_size=a.g, local_window=a.s, n_heads=self.model.n_heads,
                               head_dim=self.model.head_dim, rope_base=a.rope.base,
                               rope_enabled=a.rope.enabled, pooling_mode=a.pooling_mode)

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(vocab_size=m.vocab_size, d_model=m.d_model, n_layers=m.n_layers,
                           n_heads=m.n_heads, head_dim=m.head_dim, mlp_hidden=m.mlp_hidden,
                           init_scale=m.init_scale, seed=self.seed,
                           attention=self.attention_config())

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "RunConfig":
        g = self.generate
        for name in ("g_override", "s_override"):
            val = getattr(g, name)
            if val is not None and val < 1:
                raise ConfigError(f"generate.{name} must be >= 1, got {val}")
        b = self.bench
        bad = [v for v in b.variants if v not in VARIANTS] + [m for m in b.modes if m not in MODES]
        if bad:
            raise ConfigError(f"bench: unknown variant/mode {bad}")
        if not b.lengths or any(not isinstance(L, int) or L < 1 for L in b.lengths):
            raise ConfigError("bench.lengths must be a non-empty list of positive integers")
        if self.train.mode not in ("full", "partial"):
            raise ConfigError(f"train.mode must be 'full' or 'partial', got {self.train.mode!r}")
        try:
            self.model_config()
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from None
        return self


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
    kw = {}
    for name, value in data.items():
        sub = _SECTIONS.get((cls, name))
        kw[name] = _build(sub, value, f"{path}.{name}" if path else name) if sub else value
    try:
        return cls(**kw)
    except TypeError as e:
        raise ConfigError(f"{path or 'config'}: {e}") from None


_SECTIONS = {
    (RunConfig, "model"): ModelSection,
    (RunConfig, "attention"): AttentionSection,
    (RunConfig, "bench"): BenchSection,
    (RunConfig, "train"): TrainSection,
    (RunConfig, "generate"): GenerateSection,
    (AttentionSection, "rope"): RopeSection,
}


def parse_config(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(data)


def bundled_corpus() -> bytes:
    return files("cca_attention").joinpath("data/corpus.txt").read_bytes()
