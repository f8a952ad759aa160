"""Experiment configuration: one YAML file with an explicit, validated schema.

Schema (keys marked * are required)::

    seed*: int                      # global seed; every derived seed is offset from it
    data*:
      source*: synthetic | tsv
      path: str                     # tsv only; must exist
      dedup: bool                   # tsv only, default false
      synthetic: {num_classes, depth_range, skew_exponent, num_products,
                  title_noise, keywords_per_node, filler_vocab, num_brands, brand_rate}
      split: [train, validation, test]        # default [0.8, 0.1, 0.1]
      small_classes_to_train: bool            # default true
      max_src_vocab: int                      # default 100000
    systems*: [knn, rnn, transformer, rnn+transformer]
    models:                         # per-architecture ModelConfig overrides
      rnn: {embed_dim, rnn_hidden, dropout, ...}
      transformer: {embed_dim, ffn_hidden, layers, attention_heads, dropout, ...}
    training:                       # per-architecture TrainConfig overrides
      rnn: {batch_size, learning_rate, max_epochs, patience, ...}
      transformer: {...}
    decode:
      mode: beam | greedy           # default beam
      beam_size: int                # default 5
      max_len: int | null           # default: deepest training path + 2
      ensemble: [rnn, transformer]  # members of rnn+transformer
    evaluation:
      bootstrap_iterations: int     # default 1000
      crossval_folds: int           # default 4
      crossval_systems: [...]       # default: systems
      sweep: [[80, 10, 10], ...]    # default: the four standard splits
      sweep_systems: [...]          # default: systems
      workers: int                  # parallel folds / sweep cells, default 1
    output_dir: str                 # default "runs/default"

``TAXMT_OUT`` and ``TAXMT_SEED`` override ``output_dir`` and ``seed``; nothing
else can be overridden from the environment.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .corpus import SyntheticConfig
from .evaluation import DEFAULT_SWEEP
from .models import ModelConfig, TrainConfig
from .pipeline import ENSEMBLE_NAME, RNN_NAME, SYSTEM_NAMES, TRANSFORMER_NAME, DecodeConfig

ENV_OUT, ENV_SEED = "TAXMT_OUT", "TAXMT_SEED"
REQUIRED = ("seed", "data", "systems")
TOP_LEVEL = ("seed", "data", "systems", "models", "training", "decode", "evaluation", "output_dir")


class ConfigValidationError(ValueError):
    """The experiment config is missing keys or has invalid values."""


def _check_keys(section: str, given: Mapping, allowed) -> None:
    extra = sorted(set(given) - set(allowed))
    if extra:
        raise ConfigValidationError(f"{section}: unknown keys {extra}")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    data: dict
    systems: tuple[str, ...]
    models: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    decode: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)
    output_dir: str = "runs/default"

    # -- construction ------------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], base_dir: str | Path = ".") -> ExperimentConfig:
        if not isinstance(raw, Mapping):
            raise ConfigValidationError("config root must be a mapping")
        missing = [k for k in REQUIRED if k not in raw]
        if missing:
            raise ConfigValidationError(f"missing required config keys: {missing}")
        _check_keys("config", raw, TOP_LEVEL)
        raw = copy.deepcopy(dict(raw))
        data = dict(raw["data"] or {})
        if "source" not in data:
            raise ConfigValidationError("missing required config keys: ['data.source']")
        if data["source"] == "tsv":
            if "path" not in data:
                raise ConfigValidationError("missing required config keys: ['data.path']")
            path = Path(data["path"])
            if not path.is_absolute():
                path = Path(base_dir) / path
            if not path.is_file():
                raise ConfigValidationError(f"data.path does not exist: {path}")
            data["path"] = str(path)
        elif data["source"] != "synthetic":
            raise ConfigValidationError(f"data.source must be 'synthetic' or 'tsv', got {data['source']!r}")
        _check_keys("data", data, ("source", "path", "dedup", "synthetic", "split", "small_classes_to_train",
                                   "max_src_vocab"))
        cfg = cls(
            seed=int(raw["seed"]),
            data=data,
            systems=tuple(raw["systems"]),
            models=dict(raw.get("models") or {}),
            training=dict(raw.get("training") or {}),
            decode=dict(raw.get("decode") or {}),
            evaluation=dict(raw.get("evaluation") or {}),
            output_dir=str(raw.get("output_dir", "runs/default")),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path, env: Mapping[str, str] | None = None) -> ExperimentConfig:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigValidationError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigValidationError(f"{path}: not valid YAML: {exc}") from exc
        raw = dict(raw or {})
        env = os.environ if env is None else env
        if env.get(ENV_OUT):
            raw["output_dir"] = env[ENV_OUT]
        if env.get(ENV_SEED):
            try:
                raw["seed"] = int(env[ENV_SEED])
            except ValueError as exc:
                raise ConfigValidationError(f"{ENV_SEED} must be an integer") from exc
        return cls.from_dict(raw, base_dir=path.parent)

    def replace(self, **changes) -> ExperimentConfig:
        d = self.to_dict()
        d.update(changes)
        return ExperimentConfig.from_dict(d)

    # -- validation ----------------------------------------------------------------

    def validate(self) -> None:
        unknown = sorted(set(self.systems) - set(SYSTEM_NAMES))
        if unknown or not self.systems:
            raise ConfigValidationError(f"systems must be a non-empty subset of {list(SYSTEM_NAMES)}, got {unknown}")
        self.synthetic_config()
        split = self.split_ratios()
        if len(split) != 3 or any(r <= 0 for r in split) or abs(sum(split) - 1) > 1e-9:
            raise ConfigValidationError(f"data.split must be three positive ratios summing to 1, got {split}")
        for section, allowed in (("models", (RNN_NAME, TRANSFORMER_NAME)), ("training", (RNN_NAME, TRANSFORMER_NAME))):
            _check_keys(section, getattr(self, section), allowed)
        for name in (RNN_NAME, TRANSFORMER_NAME):
            _check_keys(f"models.{name}", self.models.get(name) or {}, ModelConfig.__dataclass_fields__)
            _check_keys(f"training.{name}", self.training.get(name) or {}, TrainConfig.__dataclass_fields__)
            try:
                self.train_config(name).validate()
            except (TypeError, ValueError) as exc:
                raise ConfigValidationError(f"training.{name}: {exc}") from exc
        _check_keys("decode", self.decode, ("mode", "beam_size", "max_len", "ensemble"))
        members = self.ensemble_members()
        if sorted(members) != sorted((RNN_NAME, TRANSFORMER_NAME)):
            raise ConfigValidationError(f"decode.ensemble must name the declared models rnn and transformer, got {members}")
        dec = self.decode_config()
        if dec.mode not in ("beam", "greedy") or dec.beam_size < 1:
            raise ConfigValidationError("decode.mode must be beam|greedy and beam_size >= 1")
        _check_keys("evaluation", self.evaluation, ("bootstrap_iterations", "crossval_folds", "crossval_systems",
                                                    "sweep", "sweep_systems", "workers"))
        for key in ("crossval_systems", "sweep_systems"):
            bad = sorted(set(self.evaluation.get(key, ())) - set(SYSTEM_NAMES))
            if bad:
                raise ConfigValidationError(f"evaluation.{key}: unknown systems {bad}")
        for triple in self.sweep_splits():
            if len(triple) != 3 or any(x <= 0 for x in triple) or sum(triple) != 100:
                raise ConfigValidationError(f"evaluation.sweep: invalid triple {triple}")
        if self.bootstrap_iterations < 1 or self.crossval_folds < 2 or self.workers < 1:
            raise ConfigValidationError("bootstrap_iterations >= 1, crossval_folds >= 2 and workers >= 1 required")

    # -- typed views ---------------------------------------------------------------

    def synthetic_config(self) -> SyntheticConfig:
        extra = dict(self.data.get("synthetic") or {})
        _check_keys("data.synthetic", extra, set(SyntheticConfig.__dataclass_fields__) - {"seed"})
        return SyntheticConfig.from_dict({**extra, "seed": self.seed})

    def split_ratios(self) -> tuple[float, ...]:
        return tuple(float(x) for x in self.data.get("split", (0.8, 0.1, 0.1)))

    def train_config(self, name: str) -> TrainConfig:
        offset = 0 if name == RNN_NAME else 1
        d = {"seed": self.seed + offset, **(self.training.get(name) or {})}
        return TrainConfig.from_dict(d)

    def model_overrides(self) -> dict[str, dict]:
        return {name: dict(self.models.get(name) or {}) for name in (RNN_NAME, TRANSFORMER_NAME)}

    def decode_config(self) -> DecodeConfig:
        d = {k: v for k, v in self.decode.items() if k != "ensemble"}
        return DecodeConfig.from_dict(d)

    def ensemble_members(self) -> list[str]:
        return list(self.decode.get("ensemble", (RNN_NAME, TRANSFORMER_NAME)))

    @property
    def bootstrap_iterations(self) -> int:
        return int(self.evaluation.get("bootstrap_iterations", 1000))

    @property
    def crossval_folds(self) -> int:
        return int(self.evaluation.get("crossval_folds", 4))

    @property
    def workers(self) -> int:
        return int(self.evaluation.get("workers", 1))

    def crossval_systems(self) -> tuple[str, ...]:
        return tuple(self.evaluation.get("crossval_systems", self.systems))

    def sweep_systems(self) -> tuple[str, ...]:
        return tuple(self.evaluation.get("sweep_systems", self.systems))

    def sweep_splits(self) -> list[tuple[int, ...]]:
        return [tuple(int(x) for x in t) for t in self.evaluation.get("sweep", DEFAULT_SWEEP)]

    def needs_models(self, systems=None) -> list[str]:
        systems = self.systems if systems is None else systems
        return [n for n in (RNN_NAME, TRANSFORMER_NAME) if n in systems or ENSEMBLE_NAME in systems]

    # -- hashing ----------------------------------------------------------------------

    def to_dict(self) -> dict:
        return {"seed": self.seed, "data": self.data, "systems": list(self.systems), "models": self.models,
                "training": self.training, "decode": self.decode, "evaluation": self.evaluation,
                "output_dir": self.output_dir}

    def hash(self, sections: tuple[str, ...] | None = None) -> str:
        """SHA-256 over canonical JSON of the config (or of selected sections).

        The output directory is never hashed, so relocating a run keeps its hash.
        """
        d = self.to_dict()
        d.pop("output_dir")
        if sections is not None:
            d = {k: d[k] for k in sections}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=list)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def data_hash(self) -> str:
        return self.hash(("seed", "data"))

    def model_hash(self) -> str:
        return self.hash(("seed", "data", "models", "training"))
