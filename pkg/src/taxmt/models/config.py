"""Model and training hyperparameters."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

RNN, TRANSFORMER = "rnn_attention", "transformer"
ARCHITECTURES = (RNN, TRANSFORMER)


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    architecture: str
    src_vocab_size: int
    tgt_vocab_size: int
    embed_dim: int = 64
    rnn_hidden: int = 128
    ffn_hidden: int = 256
    layers: int = 1
    attention_heads: int = 4
    dropout: float = 0.2
    max_source_len: int = 64
    max_target_len: int = 16
    seed: int = 0

    def validate(self) -> ModelConfig:
        if self.architecture not in ARCHITECTURES:
            raise ModelConfigError(f"unknown architecture {self.architecture!r}")
        for name in ("src_vocab_size", "tgt_vocab_size", "embed_dim", "layers", "max_source_len", "max_target_len"):
            if getattr(self, name) < 1:
                raise ModelConfigError(f"{name} must be positive")
        if self.tgt_vocab_size < 5:
            raise ModelConfigError("target vocabulary needs the four specials plus at least one node")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelConfigError("dropout must lie in [0, 1)")
        if self.architecture == RNN:
            if self.rnn_hidden < 1:
                raise ModelConfigError("rnn_hidden must be positive")
            if self.layers != 1:
                raise ModelConfigError("the attentional RNN is single-layer")
        else:
            if self.attention_heads < 1 or self.embed_dim % self.attention_heads:
                raise ModelConfigError(
                    f"embed_dim {self.embed_dim} is not divisible by attention_heads {self.attention_heads}"
                )
            if self.ffn_hidden < 1:
                raise ModelConfigError("ffn_hidden must be positive")
        return self

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)

    @classmethod
    def desk_scale(cls, architecture: str, src_vocab_size: int, tgt_vocab_size: int, **overrides) -> ModelConfig:
        base = dict(embed_dim=64, rnn_hidden=128, ffn_hidden=256, attention_heads=4, dropout=0.2,
                    layers=1 if architecture == RNN else 2)
        base.update(overrides)
        return cls(architecture, src_vocab_size, tgt_vocab_size, **base).validate()

    @classmethod
    def full_scale(cls, architecture: str, src_vocab_size: int, tgt_vocab_size: int, **overrides) -> ModelConfig:
        base = dict(embed_dim=512, rnn_hidden=1024, ffn_hidden=2048, attention_heads=8, dropout=0.2,
                    layers=1 if architecture == RNN else 6)
        base.update(overrides)
        return cls(architecture, src_vocab_size, tgt_vocab_size, **base).validate()


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form scalar count for the layouts built by ``build_model``."""
    e, vs, vt = cfg.embed_dim, cfg.src_vocab_size, cfg.tgt_vocab_size
    if cfg.architecture == RNN:
        h = cfg.rnn_hidden
        lstm = (e + h) * 4 * h + 4 * h
        return vs * e + vt * e + 2 * lstm + 2 * h * h + h * vt + vt
    f = cfg.ffn_hidden
    attention = 4 * (e * e + e)
    ffn = 2 * e * f + f + e
    norm = 2 * e
    encoder = cfg.layers * (attention + ffn + 2 * norm)
    decoder = cfg.layers * (2 * attention + ffn + 3 * norm)
    return vs * e + vt * e + encoder + decoder + e * vt


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float | None = None
    max_epochs: int = 40
    patience: int = 4
    warmup_steps: int = 400
    clip_norm: float | None = 5.0
    teacher_forcing: bool = True
    seed: int = 0

    def validate(self) -> TrainConfig:
        if self.batch_size < 1:
            raise ModelConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ModelConfigError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ModelConfigError("max_epochs must be >= 1")
        if not self.teacher_forcing:
            raise ModelConfigError("training always uses teacher forcing")
        return self

    def lr_for(self, architecture: str) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 1e-3 if architecture == RNN else 5e-4

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)
