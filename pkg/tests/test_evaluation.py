import itertools
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taxmt.corpus import CategoryPath, ConfigurationError, make_product
from taxmt.evaluation import (
    DEFAULT_SWEEP,
    CrossValReport,
    MetricsReport,
    bootstrap_ci,
    bootstrap_indices,
    crossval_run,
    datasize_sweep,
    exact_match,
    mean_and_variance,
    nearest_rank,
    stratified_kfold,
    weighted_prf,
)
from taxmt.inference import Prediction


def oracle_prf(preds, golds):
    """Per-class loop straight from the definitions."""
    classes = set(preds) | set(golds)
    n = len(golds)
    wp = wr = wf = 0.0
    for c in classes:
        support = sum(g == c for g in golds)
        predicted = sum(p == c for p in preds)
        tp = sum(p == c and g == c for p, g in zip(preds, golds))
        p = tp / predicted if predicted else 0.0
        r = tp / support if support else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        wp += support / n * p
        wr += support / n * r
        wf += support / n * f
    return wp, wr, wf


def from_table(table):
    """Aligned (preds, golds) for a confusion table[gold][pred]."""
    preds, golds = [], []
    for g, row in enumerate(table):
        for p, count in enumerate(row):
            preds += [f"c{p}"] * count
            golds += [f"c{g}"] * count
    return preds, golds


def find_anomaly(max_count=4):
    """Smallest 2-class table whose weighted F falls outside [P, R]."""
    tables = [((a, b), (c, d)) for a, b, c, d in itertools.product(range(max_count + 1), repeat=4)
              if a + b > 0 and c + d > 0]
    tables.sort(key=lambda t: (sum(map(sum, t)), t))
    for t in tables:
        p, r, f = oracle_prf(*from_table(t))
        if f < min(p, r) - 1e-12 or f > max(p, r) + 1e-12:
            return t, (p, r, f)
    return None


class TestExactMatch:
    def test_cases(self):
        abc = CategoryPath(("A", "B", "C"))
        assert exact_match(abc, CategoryPath(("A", "B", "C")))
        assert not exact_match(abc, CategoryPath(("A", "C")))
        assert not exact_match(CategoryPath(("A", "X", "C")), abc)


class TestWeightedPRF:
    def test_all_correct(self):
        r = weighted_prf(["a", "b", "b"], ["a", "b", "b"])
        assert r.weighted() == {"precision": 1.0, "recall": 1.0, "f1": 1.0}

    def test_small_by_hand(self):
        # golds [a,a,b], preds [a,b,b]: a P=1 R=1/2 F=2/3; b P=1/2 R=1 F=2/3
        r = weighted_prf(["a", "b", "b"], ["a", "a", "b"])
        assert r.weighted_precision == pytest.approx(2 / 3 * 1 + 1 / 3 * 0.5)
        assert r.weighted_recall == pytest.approx(2 / 3 * 0.5 + 1 / 3 * 1)
        assert r.weighted_f1 == pytest.approx(2 / 3)
        assert r.per_class["a"].support == 2 and r.per_class["b"].predicted_count == 2
        assert (r.total, r.correct) == (3, 2)

    def test_predicted_only_class_has_zero_weight(self):
        r = weighted_prf(["z", "a"], ["a", "a"])
        assert r.per_class["z"].support == 0
        assert r.weighted_precision == pytest.approx(1.0)
        assert r.weighted_recall == pytest.approx(0.5)

    def test_errors(self):
        with pytest.raises(ValueError):
            weighted_prf(["a"], ["a", "b"])
        with pytest.raises(ValueError):
            weighted_prf([], [])

    def test_oracle_equivalence_1000_instances(self):
        rng = np.random.default_rng(0)
        start = time.perf_counter()
        for _ in range(1000):
            n = int(rng.integers(1, 21))
            k = int(rng.integers(1, 6))
            golds = [f"c{x}" for x in rng.integers(0, k, n)]
            preds = [f"c{x}" for x in rng.integers(0, k, n)]
            rep = weighted_prf(preds, golds)
            got = (rep.weighted_precision, rep.weighted_recall, rep.weighted_f1)
            np.testing.assert_allclose(got, oracle_prf(preds, golds), rtol=0, atol=1e-12)
        assert time.perf_counter() - start < 10

    @given(st.lists(st.tuples(st.sampled_from("abcd"), st.sampled_from("abcde")), min_size=1, max_size=30))
    @settings(max_examples=200, deadline=None)
    def test_report_invariants(self, pairs):
        golds, preds = zip(*pairs)
        r = weighted_prf(list(preds), list(golds))
        assert sum(s.support for s in r.per_class.values()) == r.total == len(pairs)
        assert sum(s.true_positives for s in r.per_class.values()) == sum(p == g for g, p in pairs) == r.correct
        for s in r.per_class.values():
            assert 0 <= s.precision <= 1 and 0 <= s.recall <= 1 and 0 <= s.f1 <= 1
        assert r.weighted_recall == pytest.approx(r.accuracy)

    def test_f1_outside_precision_recall(self):
        found = find_anomaly()
        assert found is not None
        table, (p, r, f) = found
        # gold c0: one right, one called c1; gold c1: both right
        assert table == ((1, 1), (0, 2))
        assert (p, r, f) == pytest.approx((5 / 6, 3 / 4, 11 / 15))
        rep = weighted_prf(*from_table(table))
        assert rep.weighted_f1 < min(rep.weighted_precision, rep.weighted_recall)


class TestBootstrap:
    def test_all_correct_is_degenerate(self):
        golds = ["a", "b", "b", "c"]
        rep = bootstrap_ci(golds, golds, iterations=200, seed=3)
        for m in ("precision", "recall", "f1"):
            assert rep.p5[m] == rep.p95[m] == 1.0

    def test_two_item_trace(self):
        # preds [a, b], golds [a, a]; each resample is one of four index pairs
        outcome = {(0, 0): (1.0, 1.0, 1.0), (1, 1): (0.0, 0.0, 0.0),
                   (0, 1): (1.0, 0.5, 2 / 3), (1, 0): (1.0, 0.5, 2 / 3)}
        trace = []
        for i in range(8):
            # documented sampler: iteration i draws from default_rng([seed, i])
            idx = tuple(int(x) for x in np.random.default_rng([11, i]).integers(0, 2, size=2))
            assert tuple(bootstrap_indices(2, i, 11)) == idx
            trace.append(outcome[idx])
        rep = bootstrap_ci(["a", "b"], ["a", "a"], iterations=8, seed=11)
        for j, m in enumerate(("precision", "recall", "f1")):
            vals = sorted(t[j] for t in trace)
            np.testing.assert_allclose(rep.samples[m], [t[j] for t in trace])
            # nearest rank over 8 values: p5 -> rank 1, p95 -> rank 8
            assert rep.p5[m] == pytest.approx(vals[0])
            assert rep.p95[m] == pytest.approx(vals[-1])

    def test_nearest_rank(self):
        vals = list(range(1, 101))
        assert nearest_rank(vals, 5) == 5 and nearest_rank(vals, 95) == 95
        assert nearest_rank([7.0], 5) == 7.0

    @pytest.mark.parametrize("seed", range(10))
    def test_point_inside_interval(self, seed):
        rng = np.random.default_rng(seed)
        golds = [f"c{x}" for x in rng.integers(0, 5, 150)]
        preds = [g if rng.random() < 0.7 else f"c{rng.integers(0, 5)}" for g in golds]
        rep = bootstrap_ci(preds, golds, iterations=300, seed=seed)
        for m in ("precision", "recall", "f1"):
            assert rep.p5[m] <= rep.point[m] <= rep.p95[m]

    def test_deterministic(self):
        preds, golds = ["a", "b", "a", "c"], ["a", "a", "b", "c"]
        assert bootstrap_ci(preds, golds, 50, seed=2) == bootstrap_ci(preds, golds, 50, seed=2)
        assert bootstrap_ci(preds, golds, 50, seed=2).samples == bootstrap_ci(preds, golds, 50, seed=2).samples


def _catalog(sizes):
    out, pid = [], 0
    for label, n in sizes.items():
        for _ in range(n):
            out.append(make_product(pid, f"{label.lower()} thing {pid}", ("R", label)))
            pid += 1
    return out


class TestKFold:
    def test_single_class_even_folds(self):
        folds = stratified_kfold(_catalog({"A": 8}), k=4, seed=0)
        assert [len(test) for _, test in folds] == [2, 2, 2, 2]

    def test_partition(self):
        products = _catalog({"A": 9, "B": 5, "C": 3, "D": 1})
        folds = stratified_kfold(products, k=4, seed=1)
        tests = [set(t) for _, t in folds]
        assert set().union(*tests) == {p.id for p in products}
        assert sum(map(len, tests)) == len(products)
        for train, test in folds:
            assert set(train).isdisjoint(test) and len(train) + len(test) == len(products)

    def test_class_of_three(self):
        products = _catalog({"A": 5, "B": 3})
        b_ids = {p.id for p in products if p.gold_path.nodes[-1] == "B"}
        for seed in range(5):
            folds = stratified_kfold(products, k=4, seed=seed)
            assert sum(1 for _, t in folds if b_ids & set(t)) == 3

    def test_errors(self):
        with pytest.raises(ConfigurationError):
            stratified_kfold(_catalog({"A": 8}), k=1)
        with pytest.raises(ValueError):
            stratified_kfold(_catalog({"A": 3}), k=4 + 1)


class TestAggregates:
    def test_hand_fold_values(self):
        assert mean_and_variance([1, 0, 0, 0]) == (0.25, 0.25)
        assert mean_and_variance([0.7, 0.7, 0.7]) == (pytest.approx(0.7), pytest.approx(0.0))

    def test_from_folds(self):
        folds = [MetricsReport({}, p, p, p, 1, 1) for p in (1.0, 0.0, 0.0, 0.0)]
        rep = CrossValReport.from_folds(folds)
        assert rep.mean["f1"] == 0.25 and rep.variance["f1"] == 0.25


class MajorityPredictor:
    def __init__(self, train):
        labels = [p.gold_path for p in train]
        self.path = max(set(labels), key=lambda x: (labels.count(x), x.serialize()))

    def predict(self, products):
        return [Prediction(p.id, self.path, 0.0) for p in products]


class OraclePredictor:
    def predict(self, products):
        return [Prediction(p.id, p.gold_path, 0.0) for p in products]


def factory(train, val, seed):
    return {"majority": MajorityPredictor(train), "oracle": OraclePredictor()}


class TestHarness:
    def test_crossval(self):
        products = _catalog({"A": 20, "B": 12, "C": 8})
        out = crossval_run(products, factory, k=4, seed=0)
        assert out["oracle"].mean == {"precision": 1.0, "recall": 1.0, "f1": 1.0}
        assert out["oracle"].variance["f1"] == 0.0
        maj = out["majority"]
        assert maj.k == 4
        vals = [f.weighted_f1 for f in maj.folds]
        assert min(vals) <= maj.mean["f1"] <= max(vals)

    def test_crossval_reports_failing_fold(self):
        def broken(train, val, seed):
            raise ArithmeticError("boom")

        with pytest.raises(RuntimeError, match="fold 0"):
            crossval_run(_catalog({"A": 8}), broken)

    def test_sweep_headers_and_cells(self):
        products = _catalog({"A": 30, "B": 20, "C": 10})
        table = datasize_sweep(products, factory)
        assert table.columns == ["80-10-10", "60-10-30", "40-10-50", "20-10-70"]
        assert table.rows["oracle"] == dict.fromkeys(table.columns, 1.0)
        assert list(DEFAULT_SWEEP[0]) == [80, 10, 10]

    def test_single_cell_matches_direct_run(self):
        from taxmt.corpus import stratified_split

        products = _catalog({"A": 30, "B": 20})
        table = datasize_sweep(products, factory, splits=[(80, 10, 10)], seed=4)
        split = stratified_split(products, (0.8, 0.1, 0.1), seed=4)
        by_id = {p.id: p for p in products}
        test = [by_id[i] for i in split.test]
        direct = weighted_prf([MajorityPredictor([by_id[i] for i in split.train]).path] * len(test),
                              [p.gold_path for p in test])
        assert table.rows["majority"]["80-10-10"] == direct.weighted_f1

    def test_invalid_triple(self):
        with pytest.raises(ConfigurationError):
            datasize_sweep(_catalog({"A": 10}), factory, splits=[(80, 10, 5)])

    def test_parallel_equals_sequential(self):
        from taxmt.pipeline import SystemFactory

        products = _catalog({"A": 24, "B": 12, "C": 8})
        knn = SystemFactory(("knn",))
        seq = crossval_run(products, knn, k=4, seed=2)
        par = crossval_run(products, knn, k=4, seed=2, workers=3)
        assert {n: r.to_dict() for n, r in seq.items()} == {n: r.to_dict() for n, r in par.items()}
        assert datasize_sweep(products, knn, seed=5) == datasize_sweep(products, knn, seed=5, workers=2)
