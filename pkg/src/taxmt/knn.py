"""1-nearest-neighbour baseline over tf-idf title vectors."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import sparse

from .corpus import CategoryPath, Product
from .inference import Prediction


@dataclass(frozen=True)
class TfidfIndex:
    """Unit-norm tf-idf rows for every training product with a non-zero vector.

    ``zero_vector_ids`` lists training products dropped because all their
    tokens have idf 0.
    """

    idf: dict[str, float]
    columns: dict[str, int]
    matrix: sparse.csr_matrix
    product_ids: tuple[int, ...]
    paths: tuple[CategoryPath, ...]
    zero_vector_ids: tuple[int, ...]
    fallback_path: CategoryPath

    def vectorize(self, tokens: Sequence[str]) -> dict[int, float]:
        """Normalized sparse query vector as {column: weight}; empty when zero."""
        counts = Counter(t for t in tokens if t in self.columns)
        weights = {self.columns[t]: c * self.idf[t] for t, c in sorted(counts.items())}
        norm = math.sqrt(sum(w * w for w in weights.values()))
        if norm == 0.0:
            return {}
        return {k: w / norm for k, w in weights.items() if w != 0.0}


def build_index(train_products: Sequence[Product]) -> TfidfIndex:
    """tf = raw count, idf = ln(N / df), rows L2-normalized."""
    if not train_products:
        raise ValueError("cannot index an empty training set")
    n = len(train_products)
    df = Counter(t for p in train_products for t in set(p.title_tokens))
    vocab = sorted(df)
    columns = {t: i for i, t in enumerate(vocab)}
    idf = {t: math.log(n / df[t]) for t in vocab}
    rows, cols, vals = [], [], []
    kept_ids, kept_paths, zero_ids = [], [], []
    for p in train_products:
        counts = Counter(p.title_tokens)
        weights = [(columns[t], c * idf[t]) for t, c in sorted(counts.items())]
        norm = math.sqrt(sum(w * w for _, w in weights))
        if norm == 0.0:
            zero_ids.append(p.id)
            continue
        r = len(kept_ids)
        for col, w in weights:
            if w != 0.0:
                rows.append(r)
                cols.append(col)
                vals.append(w / norm)
        kept_ids.append(p.id)
        kept_paths.append(p.gold_path)
    matrix = sparse.csr_matrix((vals, (rows, cols)), shape=(len(kept_ids), len(vocab)))
    freq = Counter(p.gold_path for p in train_products)
    fallback = min(freq, key=lambda path: (-freq[path], path.serialize()))
    return TfidfIndex(idf, columns, matrix, tuple(kept_ids), tuple(kept_paths), tuple(zero_ids), fallback)


@dataclass(frozen=True)
class Neighbour:
    path: CategoryPath
    similarity: float
    row: int | None

    @property
    def fallback(self) -> bool:
        return self.row is None


def nearest(index: TfidfIndex, title_tokens: Sequence[str]) -> Neighbour:
    q = index.vectorize(title_tokens)
    if not q or index.matrix.shape[0] == 0:
        return Neighbour(index.fallback_path, 0.0, None)
    qv = np.zeros(index.matrix.shape[1])
    for k, w in q.items():
        qv[k] = w
    sims = index.matrix @ qv
    row = int(np.argmax(sims))
    return Neighbour(index.paths[row], float(sims[row]), row)


def knn_predict(index: TfidfIndex, title_tokens: Sequence[str]) -> CategoryPath:
    """Gold path of the most cosine-similar training title (lowest row on ties).

    A query with no known, informative token returns the most frequent
    training path; use :func:`nearest` to see whether that happened.
    """
    return nearest(index, title_tokens).path


class KNNClassifier:
    name = "knn"

    def __init__(self, train_products: Sequence[Product]):
        self.index = build_index(train_products)

    def predict(self, products: Sequence[Product]) -> list[Prediction]:
        out = []
        for p in products:
            nb = nearest(self.index, p.title_tokens)
            out.append(Prediction(p.id, nb.path, nb.similarity, fallback=nb.fallback))
        return out
