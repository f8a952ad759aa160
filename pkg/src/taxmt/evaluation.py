"""Exact-match scoring, support-weighted P/R/F, bootstrap, k-fold and data-size sweeps."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import CategoryPath, ConfigurationError, Product, group_by_label, stratified_partition, stratified_split

logger = logging.getLogger(__name__)

METRICS = ("precision", "recall", "f1")


def exact_match(predicted: CategoryPath, gold: CategoryPath) -> bool:
    """True iff every node matches, in order."""
    return tuple(predicted.nodes) == tuple(gold.nodes)


def _label(x) -> str:
    if isinstance(x, CategoryPath):
        return x.serialize()
    if isinstance(x, str):
        return x
    return CategoryPath(tuple(x)).serialize()


@dataclass(frozen=True)
class ClassStats:
    support: int
    true_positives: int
    predicted_count: int
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class MetricsReport:
    per_class: dict[str, ClassStats]
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    total: int
    correct: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total

    def weighted(self) -> dict[str, float]:
        return {"precision": self.weighted_precision, "recall": self.weighted_recall, "f1": self.weighted_f1}

    def to_dict(self, per_class: bool = False) -> dict:
        d = {"total": self.total, "correct": self.correct, "accuracy": self.accuracy, **self.weighted()}
        if per_class:
            d["per_class"] = {c: vars(s) for c, s in sorted(self.per_class.items())}
        return d


def _encode_labels(predictions, golds) -> tuple[np.ndarray, np.ndarray, list[str]]:
    if len(predictions) != len(golds):
        raise ValueError(f"{len(predictions)} predictions vs {len(golds)} gold labels")
    if not golds:
        raise ValueError("cannot score an empty list")
    pred = [_label(p) for p in predictions]
    gold = [_label(g) for g in golds]
    classes = sorted(set(pred) | set(gold))
    code = {c: i for i, c in enumerate(classes)}
    return np.array([code[p] for p in pred]), np.array([code[g] for g in gold]), classes


def _class_counts(pred: np.ndarray, gold: np.ndarray, k: int):
    support = np.bincount(gold, minlength=k)
    predicted = np.bincount(pred, minlength=k)
    tp = np.bincount(gold[pred == gold], minlength=k)
    return support, predicted, tp


def _per_class_scores(support, predicted, tp):
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 0.0)
        recall = np.where(support > 0, tp / np.maximum(support, 1), 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1.0), 0.0)
    return precision, recall, f1


def _weighted_scores(pred: np.ndarray, gold: np.ndarray, k: int) -> tuple[float, float, float]:
    support, predicted, tp = _class_counts(pred, gold, k)
    precision, recall, f1 = _per_class_scores(support, predicted, tp)
    n = support.sum()
    return float(support @ precision / n), float(support @ recall / n), float(support @ f1 / n)


def weighted_prf(predictions: Sequence, golds: Sequence) -> MetricsReport:
    """Per-class P/R/F over full-path labels, averaged with gold-support weights.

    Classes are the union of gold and predicted labels; a class never
    predicted has precision 0, and one never gold has weight 0.
    """
    pred, gold, classes = _encode_labels(predictions, golds)
    k = len(classes)
    support, predicted, tp = _class_counts(pred, gold, k)
    precision, recall, f1 = _per_class_scores(support, predicted, tp)
    n = support.sum()
    per_class = {
        c: ClassStats(int(support[i]), int(tp[i]), int(predicted[i]), float(precision[i]), float(recall[i]), float(f1[i]))
        for i, c in enumerate(classes)
    }
    return MetricsReport(per_class, float(support @ precision / n), float(support @ recall / n),
                         float(support @ f1 / n), len(gold), int(tp.sum()))


# -- bootstrap ---------------------------------------------------------------------

def nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile of already sorted values."""
    n = len(sorted_values)
    rank = max(1, math.ceil(pct / 100.0 * n))
    return float(sorted_values[min(rank, n) - 1])


@dataclass(frozen=True)
class BootstrapReport:
    iterations: int
    seed: int
    point: dict[str, float]
    p5: dict[str, float]
    p95: dict[str, float]
    samples: dict[str, list[float]] = field(repr=False, compare=False, default_factory=dict)

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "seed": self.seed, "point": self.point, "p5": self.p5, "p95": self.p95}


def bootstrap_indices(n: int, iteration: int, seed: int) -> np.ndarray:
    """Resample indices for one iteration; independent of every other iteration."""
    return np.random.default_rng([seed, iteration]).integers(0, n, size=n)


def bootstrap_ci(predictions: Sequence, golds: Sequence, iterations: int = 1000, seed: int = 0) -> BootstrapReport:
    """Resample the aligned (prediction, gold) pairs with replacement.

    Reports the nearest-rank 5th and 95th percentiles of each weighted
    metric next to the full-sample point estimate.
    """
    pred, gold, classes = _encode_labels(predictions, golds)
    k, n = len(classes), len(gold)
    stats = {m: [] for m in METRICS}
    for i in range(iterations):
        idx = bootstrap_indices(n, i, seed)
        for m, v in zip(METRICS, _weighted_scores(pred[idx], gold[idx], k)):
            stats[m].append(v)
    point = dict(zip(METRICS, _weighted_scores(pred, gold, k)))
    p5, p95 = {}, {}
    for m in METRICS:
        srt = sorted(stats[m])
        p5[m] = nearest_rank(srt, 5)
        p95[m] = nearest_rank(srt, 95)
    return BootstrapReport(iterations, seed, point, p5, p95, stats)


# -- cross-validation --------------------------------------------------------------

def stratified_kfold(products: Sequence[Product], k: int = 4, seed: int = 0) -> list[tuple[list[int], list[int]]]:
    """Round-robin assignment of each class's shuffled members to ``k`` folds.

    The round-robin cursor carries over between classes so fold sizes differ
    by at most one. Returns ``(train_ids, test_ids)`` per fold.
    """
    if k < 2:
        raise ConfigurationError("k must be >= 2")
    if len(products) < k:
        raise ValueError(f"need at least k={k} products, got {len(products)}")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    cursor = 0
    for _, members in group_by_label(products).items():
        for j in rng.permutation(len(members)):
            folds[cursor % k].append(members[j].id)
            cursor += 1
    all_ids = sorted(p.id for p in products)
    out = []
    for i in range(k):
        test = sorted(folds[i])
        held = set(test)
        out.append(([pid for pid in all_ids if pid not in held], test))
    return out


def mean_and_variance(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample variance (divisor n - 1; 0 for a single value)."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("no values")
    var = float(arr.var(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), var


@dataclass(frozen=True)
class CrossValReport:
    k: int
    folds: list[MetricsReport]
    mean: dict[str, float]
    variance: dict[str, float]

    @classmethod
    def from_folds(cls, folds: Sequence[MetricsReport]) -> CrossValReport:
        mean, var = {}, {}
        for m in METRICS:
            mean[m], var[m] = mean_and_variance([f.weighted()[m] for f in folds])
        return cls(len(folds), list(folds), mean, var)

    def to_dict(self) -> dict:
        return {"k": self.k, "mean": self.mean, "variance": self.variance,
                "folds": [f.to_dict() for f in self.folds]}


# A factory receives (train, validation, seed) and returns named predictors,
# each exposing ``predict(products) -> list[Prediction]``.
SystemFactory = Callable[[Sequence[Product], Sequence[Product], int], Mapping[str, object]]


def evaluate_predictor(predictor, products: Sequence[Product]) -> MetricsReport:
    preds = predictor.predict(products)
    return weighted_prf([p.path for p in preds], [p.gold_path for p in products])


def holdout(products: Sequence[Product], fraction: float, seed: int) -> tuple[list[Product], list[Product]]:
    """Stratified (rest, held-out) partition with ``fraction`` held out."""
    keep, held = stratified_partition(products, (1.0 - fraction, fraction), seed)
    by_id = {p.id: p for p in products}
    return [by_id[i] for i in keep], [by_id[i] for i in held]


def _map_units(fn, units: Sequence, workers: int) -> list:
    """Run ``fn`` over independent units, in order, optionally in worker processes.

    Every unit carries its own seed, so the results equal the sequential run.
    """
    if workers <= 1 or len(units) <= 1:
        return [fn(*u) for u in units]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=min(workers, len(units))) as pool:
        return list(pool.map(fn, *zip(*units)))


def _crossval_fold(fold, train_part, val_part, test_part, factory, fold_seed):
    try:
        systems = factory(train_part, val_part, fold_seed)
        reports = {name: evaluate_predictor(predictor, test_part) for name, predictor in systems.items()}
    except Exception as exc:
        raise RuntimeError(f"cross-validation fold {fold} failed: {exc}") from exc
    logger.info("fold %d done", fold)
    return reports


def crossval_run(products: Sequence[Product], factory: SystemFactory, k: int = 4, seed: int = 0,
                 validation_fraction: float = 0.1, workers: int = 1) -> dict[str, CrossValReport]:
    """Train every system on each fold and aggregate weighted metrics.

    With ``workers > 1`` folds run in separate processes; ``factory`` must then
    be picklable.
    """
    by_id = {p.id: p for p in products}
    units = []
    for fold, (train_ids, test_ids) in enumerate(stratified_kfold(products, k, seed)):
        fold_seed = seed + 1009 * (fold + 1)
        train_part, val_part = holdout([by_id[i] for i in train_ids], validation_fraction, fold_seed)
        units.append((fold, train_part, val_part, [by_id[i] for i in test_ids], factory, fold_seed))
    per_system: dict[str, list[MetricsReport]] = {}
    for reports in _map_units(_crossval_fold, units, workers):
        for name, report in reports.items():
            per_system.setdefault(name, []).append(report)
    return {name: CrossValReport.from_folds(reports) for name, reports in per_system.items()}


# -- data-size sweep ----------------------------------------------------------------

DEFAULT_SWEEP = ((80, 10, 10), (60, 10, 30), (40, 10, 50), (20, 10, 70))


def split_label(triple: Sequence[int]) -> str:
    return "-".join(str(int(x)) for x in triple)


@dataclass(frozen=True)
class SweepTable:
    columns: list[str]
    rows: dict[str, dict[str, float]]

    def to_dict(self) -> dict:
        return {"columns": self.columns, "rows": self.rows}


def _sweep_cell(col, train_part, val_part, test_part, factory, seed):
    scores = {name: evaluate_predictor(predictor, test_part).weighted_f1
              for name, predictor in factory(train_part, val_part, seed).items()}
    logger.info("sweep cell %s done", col)
    return scores


def datasize_sweep(products: Sequence[Product], factory: SystemFactory,
                   splits: Sequence[Sequence[int]] = DEFAULT_SWEEP, seed: int = 0, workers: int = 1) -> SweepTable:
    """Weighted F of every system on one stratified split per (train, val, test) triple."""
    for triple in splits:
        if len(triple) != 3 or any(x <= 0 for x in triple) or sum(triple) != 100:
            raise ConfigurationError(f"invalid split triple {tuple(triple)}: need three positive parts summing to 100")
    by_id = {p.id: p for p in products}
    columns = [split_label(t) for t in splits]
    units = []
    for triple, col in zip(splits, columns):
        split = stratified_split(products, tuple(x / 100 for x in triple), seed)
        units.append((col, [by_id[i] for i in split.train], [by_id[i] for i in split.validation],
                      [by_id[i] for i in split.test], factory, seed))
    rows: dict[str, dict[str, float]] = {}
    for col, scores in zip(columns, _map_units(_sweep_cell, units, workers)):
        for name, f in scores.items():
            rows.setdefault(name, {})[col] = f
    return SweepTable(columns, rows)
