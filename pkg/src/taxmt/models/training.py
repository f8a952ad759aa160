"""Mini-batch training with validation-based early stopping."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..corpus import PAD_ID, EncodedProduct
from ..tensor import Adam, backward, no_grad, ops
from .base import Seq2SeqModel, pad_batch
from .config import TRANSFORMER, TrainConfig

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for row in self.epochs:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


@dataclass(frozen=True)
class Batch:
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray

    @property
    def tokens(self) -> int:
        return int((self.tgt_out != PAD_ID).sum())


def make_batches(items: Sequence[EncodedProduct], batch_size: int, max_source_len: int | None = None) -> list[Batch]:
    """Sort by source length (stable), cut into consecutive buckets, pad."""
    order = sorted(range(len(items)), key=lambda i: (len(items[i].source_ids), i))
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = [items[i] for i in order[start:start + batch_size]]
        srcs = [c.source_ids[:max_source_len] if max_source_len else c.source_ids for c in chunk]
        tgts = [c.target_ids for c in chunk]
        src = pad_batch(srcs)
        tgt = pad_batch(tgts)
        batches.append(Batch(src, tgt[:, :-1].copy(), tgt[:, 1:].copy()))
    return batches


def batch_loss(model: Seq2SeqModel, batch: Batch, train: bool = False, rng=None, reduction: str = "mean"):
    logits = model.logits(batch.src, batch.tgt_in, train=train, rng=rng)
    b, t, v = logits.shape
    return ops.cross_entropy(ops.reshape(logits, (b * t, v)), batch.tgt_out.reshape(-1), ignore_id=PAD_ID,
                             reduction=reduction)


def evaluate_loss(model: Seq2SeqModel, batches: Sequence[Batch]) -> float:
    """Mean token cross-entropy over all non-PAD target positions."""
    total, tokens = 0.0, 0
    with no_grad():
        for b in batches:
            total += batch_loss(model, b, reduction="sum").item()
            tokens += b.tokens
    return total / max(tokens, 1)


def learning_rate(tcfg: TrainConfig, architecture: str, step: int) -> float:
    """Constant for the RNN; linear warmup then inverse square root for the Transformer."""
    peak = tcfg.lr_for(architecture)
    if architecture != TRANSFORMER or tcfg.warmup_steps <= 0:
        return peak
    return peak * min(step / tcfg.warmup_steps, math.sqrt(tcfg.warmup_steps / step))


def _clip(params, max_norm: float | None) -> float:
    sq = sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm is not None and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


def train(
    model: Seq2SeqModel,
    train_set: Sequence[EncodedProduct],
    validation_set: Sequence[EncodedProduct],
    tcfg: TrainConfig,
    epoch_callback: Callable[[int, Seq2SeqModel], bool] | None = None,
) -> tuple[Seq2SeqModel, TrainHistory]:
    """Fit ``model`` in place and return the best-validation copy.

    Stops when validation loss has not improved for ``patience`` epochs, at
    ``max_epochs``, or when ``epoch_callback(epoch, model)`` returns True.
    """
    tcfg.validate()
    if not train_set or not validation_set:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(tcfg.seed)
    maxlen = model.cfg.max_source_len
    batches = make_batches(train_set, tcfg.batch_size, maxlen)
    val_batches = make_batches(validation_set, tcfg.batch_size, maxlen)
    params = model.parameters()
    opt = Adam(params, lr=tcfg.lr_for(model.cfg.architecture))
    history = TrainHistory()
    best_val = math.inf
    best_state = model.state_dict()
    bad_epochs = 0
    step = 0
    for epoch in range(1, tcfg.max_epochs + 1):
        total, tokens = 0.0, 0
        for bi in rng.permutation(len(batches)):
            batch = batches[bi]
            step += 1
            opt.zero_grad()
            loss = batch_loss(model, batch, train=True, rng=rng)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, step {step}")
            backward(loss)
            _clip(params, tcfg.clip_norm)
            opt.step(learning_rate(tcfg, model.cfg.architecture, step))
            total += value * batch.tokens
            tokens += batch.tokens
        train_loss = total / tokens
        val_loss = evaluate_loss(model, val_batches)
        history.epochs.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        logger.debug("epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_state = model.state_dict()
            history.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
        if epoch_callback is not None and epoch_callback(epoch, model):
            best_state = model.state_dict()
            history.best_epoch = epoch
            break
        if bad_epochs >= tcfg.patience:
            history.stopped_early = True
            break
    best = model.copy()
    best.load_state_dict(best_state)
    return best, history
