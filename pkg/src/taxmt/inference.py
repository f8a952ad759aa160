"""Greedy, beam and ensemble decoding of category paths."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import BOS_ID, EOS_ID, PAD_ID, UNK_ID, CategoryPath, Product, Vocabulary
from .models import Seq2SeqModel, pad_batch

# never proposed by the decoder
BLOCKED_IDS = (PAD_ID, BOS_ID)


class VocabularyMismatch(ValueError):
    pass


@dataclass(frozen=True)
class DecodeHypothesis:
    token_ids: tuple[int, ...]
    logprob: float
    finished: bool

    @property
    def length(self) -> int:
        return len(self.token_ids)

    @property
    def score(self) -> float:
        """Length-normalized log-probability (EOS counts as a token)."""
        return self.logprob / max(self.length, 1)

    @property
    def node_ids(self) -> tuple[int, ...]:
        return self.token_ids[:-1] if self.token_ids and self.token_ids[-1] == EOS_ID else self.token_ids


class StepScorer:
    """Next-token log-probabilities of one model or a probability-averaged ensemble."""

    def __init__(self, models: Sequence[Seq2SeqModel]):
        if not models:
            raise ValueError("need at least one model")
        sizes = {m.cfg.tgt_vocab_size for m in models}
        if len(sizes) != 1:
            raise VocabularyMismatch(f"ensemble members disagree on target vocabulary size: {sorted(sizes)}")
        self.models = list(models)
        self.vocab_size = sizes.pop()

    def encode(self, src: np.ndarray) -> list:
        return [m.encode(src) for m in self.models]

    def step_probs(self, memories: list, prefixes: np.ndarray) -> np.ndarray:
        """Arithmetic mean of member probabilities, with blocked ids zeroed."""
        total = None
        for model, mem in zip(self.models, memories):
            p = np.exp(model.next_log_probs(mem, prefixes))
            total = p if total is None else total + p
        probs = total / len(self.models)
        probs[:, list(BLOCKED_IDS)] = 0.0
        return probs


def _as_scorer(models) -> StepScorer:
    if isinstance(models, StepScorer):
        return models
    if isinstance(models, Seq2SeqModel) or hasattr(models, "next_log_probs"):
        return StepScorer([models])
    return StepScorer(list(models))


def _log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


def greedy_decode(models, source_ids: Sequence[int], max_len: int) -> DecodeHypothesis:
    """Highest-probability token at each step (ties go to the lowest id)."""
    return greedy_decode_batch(models, [source_ids], max_len)[0]


def greedy_decode_batch(models, sources: Sequence[Sequence[int]], max_len: int) -> list[DecodeHypothesis]:
    scorer = _as_scorer(models)
    n = len(sources)
    memories = scorer.encode(pad_batch(sources))
    prefixes = np.full((n, 1), BOS_ID, dtype=np.int64)
    logprob = np.zeros(n)
    done = np.zeros(n, dtype=bool)
    emitted: list[list[int]] = [[] for _ in range(n)]
    for _ in range(max_len):
        live = np.flatnonzero(~done)
        if live.size == 0:
            break
        probs = scorer.step_probs([m.select(live) for m in memories], prefixes[live])
        choice = probs.argmax(axis=1)
        next_col = np.full(n, PAD_ID, dtype=np.int64)
        for row, idx in enumerate(live):
            tok = int(choice[row])
            emitted[idx].append(tok)
            logprob[idx] += float(_log(probs[row, tok]))
            next_col[idx] = tok
            if tok == EOS_ID:
                done[idx] = True
        prefixes = np.concatenate([prefixes, next_col[:, None]], axis=1)
    return [DecodeHypothesis(tuple(emitted[i]), float(logprob[i]), bool(done[i])) for i in range(n)]


def beam_decode(models, source_ids: Sequence[int], beam_size: int, max_len: int) -> list[DecodeHypothesis]:
    """Beam search ranked by length-normalized log-probability.

    At every step all extensions of the active hypotheses compete; the best
    ``beam_size`` are kept, and those ending in EOS leave the beam as
    finished. Hypotheses still active after ``max_len`` tokens are returned
    unfinished. The result holds at most ``beam_size`` hypotheses, best first,
    ties broken by token sequence.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    scorer = _as_scorer(models)
    memories = scorer.encode(pad_batch([source_ids]))
    active: list[DecodeHypothesis] = [DecodeHypothesis((), 0.0, False)]
    finished: list[DecodeHypothesis] = []
    for _ in range(max_len):
        if not active:
            break
        prefixes = np.array([(BOS_ID, *h.token_ids) for h in active], dtype=np.int64)
        step_lp = _log(scorer.step_probs([m.select(np.zeros(len(active), dtype=np.int64)) for m in memories], prefixes))
        candidates = []
        for h, row in zip(active, step_lp):
            for tok in np.flatnonzero(np.isfinite(row)):
                candidates.append(DecodeHypothesis((*h.token_ids, int(tok)), h.logprob + float(row[tok]),
                                                   int(tok) == EOS_ID))
        candidates.sort(key=_rank_key)
        kept = candidates[:beam_size]
        finished.extend(h for h in kept if h.finished)
        active = [h for h in kept if not h.finished]
    finished.extend(active)
    finished.sort(key=_rank_key)
    return finished[:beam_size]


def _rank_key(h: DecodeHypothesis):
    return (-h.score, h.token_ids)


def ensemble_decode(models: Sequence[Seq2SeqModel], source_ids: Sequence[int], beam_size: int,
                    max_len: int) -> list[DecodeHypothesis]:
    """Beam search over the step-wise average of member probabilities."""
    return beam_decode(StepScorer(models), source_ids, beam_size, max_len)


# -- product-level prediction ----------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    product_id: int
    path: CategoryPath
    score: float
    truncated: bool = False
    has_unk: bool = False
    fallback: bool = False


def hypothesis_to_path(h: DecodeHypothesis, tgt_vocab: Vocabulary) -> CategoryPath:
    return CategoryPath(tuple(tgt_vocab.id_to_token[i] for i in h.node_ids))


class Translator:
    """Decode products into category paths with one model or an ensemble."""

    def __init__(self, models: Sequence[Seq2SeqModel] | Seq2SeqModel, src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                 beam_size: int = 5, max_len: int = 8, mode: str = "beam"):
        self.scorer = _as_scorer(models)
        if self.scorer.vocab_size != len(tgt_vocab):
            raise VocabularyMismatch("model output size differs from the target vocabulary")
        if mode not in ("beam", "greedy"):
            raise ValueError(f"unknown decode mode {mode!r}")
        self.src_vocab, self.tgt_vocab = src_vocab, tgt_vocab
        self.beam_size, self.max_len, self.mode = beam_size, max_len, mode
        self.max_source_len = min(m.cfg.max_source_len for m in self.scorer.models)

    def _source(self, p: Product) -> list[int]:
        return self.src_vocab.encode(p.title_tokens)[: self.max_source_len]

    def hypotheses(self, products: Sequence[Product]) -> list[DecodeHypothesis]:
        if self.mode == "greedy":
            return greedy_decode_batch(self.scorer, [self._source(p) for p in products], self.max_len)
        return [beam_decode(self.scorer, self._source(p), self.beam_size, self.max_len)[0] for p in products]

    def predict(self, products: Sequence[Product]) -> list[Prediction]:
        out = []
        for p, h in zip(products, self.hypotheses(products)):
            path = hypothesis_to_path(h, self.tgt_vocab)
            out.append(Prediction(p.id, path, h.score, truncated=not h.finished, has_unk=UNK_ID in h.node_ids))
        return out


def write_predictions_tsv(path: str | Path, predictions: Iterable[Prediction], header: str | None = None) -> None:
    """``product_id<TAB>predicted_path<TAB>score`` lines.

    An optional ``header`` is written first as a ``# ...`` comment line.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            fh.write(f"# {header}\n")
        for pr in predictions:
            fh.write(f"{pr.product_id}\t{pr.path.serialize()}\t{pr.score:.12g}\n")


def read_predictions_tsv(path: str | Path) -> list[Prediction]:
    """Inverse of :func:`write_predictions_tsv`; ``#`` comment lines are skipped."""
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
        pid, path_text, score = fields
        out.append(Prediction(int(pid), CategoryPath.parse(path_text), float(score)))
    return out
