"""Train every system on one split: both seq2seq models, their ensemble, and KNN."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .corpus import (
    Product,
    Vocabulary,
    build_target_vocabulary,
    build_vocabulary,
    encode_products,
)
from .inference import Translator
from .knn import KNNClassifier
from .models import RNN, TRANSFORMER, ModelConfig, Seq2SeqModel, TrainConfig, TrainHistory, build_model, train

logger = logging.getLogger(__name__)

KNN_NAME, RNN_NAME, TRANSFORMER_NAME, ENSEMBLE_NAME = "knn", "rnn", "transformer", "rnn+transformer"
SYSTEM_NAMES = (KNN_NAME, RNN_NAME, TRANSFORMER_NAME, ENSEMBLE_NAME)
ARCH_OF = {RNN_NAME: RNN, TRANSFORMER_NAME: TRANSFORMER}


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "beam"
    beam_size: int = 5
    max_len: int | None = None

    @classmethod
    def from_dict(cls, d: Mapping) -> DecodeConfig:
        return cls(**d)


@dataclass
class TrainedSystems:
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    models: dict[str, Seq2SeqModel] = field(default_factory=dict)
    histories: dict[str, TrainHistory] = field(default_factory=dict)
    predictors: dict[str, object] = field(default_factory=dict)
    data_quality: dict[str, int] = field(default_factory=dict)


def build_vocabularies(train_products: Sequence[Product], max_src_vocab: int = 100_000) -> tuple[Vocabulary, Vocabulary]:
    src = build_vocabulary((p.title_tokens for p in train_products), max_src_vocab)
    tgt = build_target_vocabulary(p.gold_path for p in train_products)
    return src, tgt


def model_config_for(name: str, src_vocab: Vocabulary, tgt_vocab: Vocabulary, overrides: Mapping | None = None,
                     seed: int = 0) -> ModelConfig:
    overrides = dict(overrides or {})
    overrides.setdefault("seed", seed)
    return ModelConfig.desk_scale(ARCH_OF[name], len(src_vocab), len(tgt_vocab), **overrides)


SEED_OFFSET = {RNN_NAME: 0, TRANSFORMER_NAME: 1}


def models_needed(systems: Sequence[str]) -> list[str]:
    """Seq2seq models a system list depends on; the ensemble pulls in both members."""
    return [n for n in (RNN_NAME, TRANSFORMER_NAME) if n in systems or ENSEMBLE_NAME in systems]


def default_max_len(train_products: Sequence[Product]) -> int:
    return max(p.gold_path.depth for p in train_products) + 2


def fit_model(name: str, src_vocab: Vocabulary, tgt_vocab: Vocabulary, enc_train, enc_val,
              overrides: Mapping | None = None, train_config: TrainConfig | None = None,
              seed: int = 0) -> tuple[Seq2SeqModel, TrainHistory]:
    """Build one seq2seq model and train it; returns the best-validation copy and its history."""
    offset_seed = seed + SEED_OFFSET[name]
    cfg = model_config_for(name, src_vocab, tgt_vocab, overrides, offset_seed)
    tcfg = train_config or TrainConfig(seed=offset_seed)
    best, history = train(build_model(cfg), enc_train, enc_val, tcfg)
    logger.info("%s: %d epochs, best %d", name, len(history.epochs), history.best_epoch)
    return best, history


def build_predictors(systems: Sequence[str], models: Mapping[str, Seq2SeqModel], src_vocab: Vocabulary,
                     tgt_vocab: Vocabulary, train_products: Sequence[Product], decode: DecodeConfig = DecodeConfig(),
                     ensemble_members: Sequence[str] = (RNN_NAME, TRANSFORMER_NAME)) -> dict[str, object]:
    """Named predictors, in the order of ``systems``."""
    max_len = decode.max_len or default_max_len(train_products)
    out: dict[str, object] = {}
    for name in systems:
        if name == KNN_NAME:
            out[name] = KNNClassifier(train_products)
        elif name == ENSEMBLE_NAME:
            members = [models[m] for m in ensemble_members]
            out[name] = Translator(members, src_vocab, tgt_vocab, decode.beam_size, max_len, decode.mode)
        else:
            out[name] = Translator(models[name], src_vocab, tgt_vocab, decode.beam_size, max_len, decode.mode)
    return out


def train_systems(
    train_products: Sequence[Product],
    val_products: Sequence[Product],
    systems: Sequence[str] = SYSTEM_NAMES,
    model_overrides: Mapping[str, Mapping] | None = None,
    train_config: TrainConfig | Mapping[str, TrainConfig] | None = None,
    decode: DecodeConfig = DecodeConfig(),
    seed: int = 0,
    max_src_vocab: int = 100_000,
) -> TrainedSystems:
    """Fit the requested systems; the ensemble pulls in both of its members."""
    unknown = set(systems) - set(SYSTEM_NAMES)
    if unknown:
        raise ValueError(f"unknown systems {sorted(unknown)}")
    src_vocab, tgt_vocab = build_vocabularies(train_products, max_src_vocab)
    out = TrainedSystems(src_vocab, tgt_vocab)
    enc_train, quality = encode_products(train_products, src_vocab, tgt_vocab)
    enc_val, val_quality = encode_products(val_products, src_vocab, tgt_vocab)
    out.data_quality = {"train_" + k: v for k, v in quality.items()}
    out.data_quality.update({"validation_" + k: v for k, v in val_quality.items()})
    if not enc_val:
        enc_val = enc_train
    for name in models_needed(systems):
        tcfg = train_config.get(name) if isinstance(train_config, Mapping) else train_config
        out.models[name], out.histories[name] = fit_model(
            name, src_vocab, tgt_vocab, enc_train, enc_val, (model_overrides or {}).get(name), tcfg, seed)
    out.predictors = build_predictors(systems, out.models, src_vocab, tgt_vocab, train_products, decode)
    return out


class SystemFactory:
    """Picklable factory for cross-validation and sweeps: (train, val, seed) -> predictors."""

    def __init__(self, systems: Sequence[str] = SYSTEM_NAMES, **kwargs):
        self.systems = tuple(systems)
        self.kwargs = kwargs

    def __call__(self, train_products, val_products, seed):
        return train_systems(train_products, val_products, self.systems, seed=seed, **self.kwargs).predictors


def system_factory(systems: Sequence[str] = SYSTEM_NAMES, **kwargs) -> SystemFactory:
    return SystemFactory(systems, **kwargs)
