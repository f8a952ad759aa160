"""Shared parameter handling for the seq2seq architectures."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ..corpus import PAD_ID
from ..tensor import Tensor, load_tensors, no_grad, save_tensors
from .config import ModelConfig, parameter_count

INIT_RANGE = 0.08


class Seq2SeqModel:
    """Named parameter tensors plus the forward passes of one architecture.

    Subclasses declare ``param_specs`` as ``(name, shape, init)`` triples where
    init is ``"uniform"``, ``"ones"`` or ``"zeros"``.
    """

    architecture: str = ""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg.validate()
        if cfg.architecture != self.architecture:
            raise ValueError(f"{type(self).__name__} cannot run a {cfg.architecture} config")
        specs = self.param_specs(cfg)
        if params is None:
            rng = np.random.default_rng(cfg.seed)
            params = {}
            for name, shape, init in specs:
                if init == "uniform":
                    data = rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)
                elif init == "ones":
                    data = np.ones(shape)
                else:
                    data = np.zeros(shape)
                params[name] = Tensor(data, requires_grad=True, name=name)
        else:
            for name, shape, _ in specs:
                if name not in params or params[name].shape != tuple(shape):
                    raise ValueError(f"parameter {name!r} missing or misshaped")
        self.params = params
        self._names = [name for name, _, _ in specs]

    @staticmethod
    def param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
        raise NotImplementedError

    # -- parameters -----------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return [self.params[n] for n in self._names]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, self.params[n]) for n in self._names]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def expected_num_parameters(self) -> int:
        return parameter_count(self.cfg)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: self.params[n].data.copy() for n in self._names}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n in self._names:
            if state[n].shape != self.params[n].shape:
                raise ValueError(f"parameter {n!r}: shape {state[n].shape} vs {self.params[n].shape}")
            self.params[n].data = np.array(state[n], dtype=np.float64)

    def copy(self) -> Seq2SeqModel:
        clone = type(self)(self.cfg, {n: Tensor(a, requires_grad=True, name=n) for n, a in self.state_dict().items()})
        return clone

    def save(self, path: str | Path, metadata: dict[str, Any] | None = None) -> None:
        meta = {"model_config": self.cfg.to_dict()}
        meta.update(metadata or {})
        save_tensors(path, self.state_dict(), meta)

    # -- forward interface ------------------------------------------------------

    def logits(self, src: np.ndarray, tgt_in: np.ndarray, train: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        """Unnormalized scores of shape (B, T, V) under teacher forcing."""
        raise NotImplementedError

    def encode(self, src: np.ndarray):
        """Encoder memory for a padded (B, S) source batch, without tape."""
        raise NotImplementedError

    def next_log_probs(self, memory, prefixes: np.ndarray) -> np.ndarray:
        """Log-distribution over the next token for each row of ``prefixes``.

        ``prefixes`` is (N, t) starting with BOS; row i is decoded against
        source row i of ``memory``.
        """
        raise NotImplementedError

    def _check_ids(self, src: np.ndarray, tgt: np.ndarray | None = None) -> None:
        if src.ndim != 2 or (tgt is not None and (tgt.ndim != 2 or src.shape[0] != tgt.shape[0])):
            raise ValueError("expected (B, S) source and (B, T) target id arrays")
        if src.shape[1] > self.cfg.max_source_len or (tgt is not None and tgt.shape[1] > self.cfg.max_target_len + 1):
            raise ValueError("sequence longer than the configured maximum")
        checks = [(src, self.cfg.src_vocab_size, "source")]
        if tgt is not None:
            checks.append((tgt, self.cfg.tgt_vocab_size, "target"))
        for arr, v, side in checks:
            if arr.size and (arr.min() < 0 or arr.max() >= v):
                raise IndexError(f"{side} token id out of range [0, {v})")


class Memory:
    """Per-source encoder outputs that can be re-indexed for beam search."""

    def __init__(self, **arrays: np.ndarray):
        self.arrays = arrays

    def __getattr__(self, name):
        try:
            return self.__dict__["arrays"][name]
        except KeyError:
            raise AttributeError(name) from None

    def select(self, index: Sequence[int] | np.ndarray) -> Memory:
        index = np.asarray(index, dtype=np.int64)
        return Memory(**{k: v[index] for k, v in self.arrays.items()})


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD_ID) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def sequence_log_probs(model: Seq2SeqModel, source_ids: Sequence[int], target_ids: Sequence[int],
                       train: bool = False) -> Tensor:
    """(T, V) log-distributions for one source and decoder-input sequence."""
    from ..tensor import ops

    src = np.asarray([source_ids], dtype=np.int64)
    tgt = np.asarray([target_ids], dtype=np.int64)
    logits = model.logits(src, tgt, train=train)
    t, v = tgt.shape[1], model.cfg.tgt_vocab_size
    return ops.log_softmax(ops.reshape(logits, (t, v)))


def load_model(path: str | Path) -> tuple[Seq2SeqModel, dict[str, Any]]:
    from . import build_model

    tensors, meta = load_tensors(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    model = build_model(cfg)
    model.load_state_dict(tensors)
    return model, meta
