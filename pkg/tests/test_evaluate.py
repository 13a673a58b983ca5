from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from routechange.errors import AllZeroDifferences, InsufficientPairs, SingleClass
from routechange.evaluate import (
    apply_threshold,
    classification_metrics,
    threshold_scan,
    wilcoxon_signed_rank,
)
from routechange.experiment import first_place_counts, pairwise_wilcoxon, summarize

import oracles


def test_metrics_example():
    y = np.array([1, 1, 1, 0, 0, 0, 0, 0, 0, 0])
    d = np.array([1, 1, 0, 1, 0, 0, 0, 0, 0, 0])
    m = classification_metrics(d, y)
    assert (m.counts.tp, m.counts.fp, m.counts.fn, m.counts.tn) == (2, 1, 1, 6)
    assert m.precision == pytest.approx(2 / 3) and m.recall == pytest.approx(2 / 3)
    assert m.f1 == pytest.approx(2 / 3) and m.accuracy == pytest.approx(0.8)


def test_metrics_no_positive_predictions():
    m = classification_metrics(np.zeros(5), np.array([1, 0, 0, 0, 0]))
    assert m.f1 == 0.0 and m.precision == 0.0


def test_threshold_scan_example():
    tau, f1 = threshold_scan([0.1, 0.4, 0.35, 0.8], [0, 1, 0, 1])
    assert tau == pytest.approx(0.351) and f1 == 1.0


def test_threshold_scan_single_class():
    with pytest.raises(SingleClass):
        threshold_scan([0.2, 0.3], [0, 0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=2, max_size=30))
def test_threshold_scan_matches_naive(rows):
    probs = [p for p, _ in rows]
    y = [int(t) for _, t in rows]
    if len(set(y)) < 2:
        return
    tau, f1 = threshold_scan(probs, y)
    want_tau, want_f1 = oracles.threshold_scan(probs, y)
    assert f1 == pytest.approx(want_f1, abs=1e-12)
    assert tau == pytest.approx(want_tau, abs=1e-12)
    got = classification_metrics(apply_threshold(probs, tau), y).f1
    assert got == pytest.approx(f1, abs=1e-12)


def test_wilcoxon_five_positive():
    r = wilcoxon_signed_rank([1.1, 2.2, 3.3, 4.4, 5.5], [1, 2, 3, 4, 5])
    assert r.method == "exact" and r.pvalue == 0.0625 and r.statistic == 0.0


def test_wilcoxon_errors():
    with pytest.raises(AllZeroDifferences):
        wilcoxon_signed_rank([1, 2, 3], [1, 2, 3])
    with pytest.raises(InsufficientPairs):
        wilcoxon_signed_rank([1, 2, 3, 4], [0, 0, 0, 0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(-4, 4), st.integers(-4, 4)), min_size=5, max_size=12))
def test_wilcoxon_exact_matches_enumeration(pairs):
    a = [x for x, _ in pairs]
    b = [y for _, y in pairs]
    if sum(x != y for x, y in pairs) < 5:
        return
    got = wilcoxon_signed_rank(a, b, method="exact").pvalue
    assert got == pytest.approx(oracles.wilcoxon_exact(a, b), abs=1e-12)


def test_wilcoxon_exact_vs_normal():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(20, 26))
        a = rng.normal(size=n)
        b = a + rng.normal(0.2, 1.0, size=n)
        e = wilcoxon_signed_rank(a, b, "exact").pvalue
        z = wilcoxon_signed_rank(a, b, "approx").pvalue
        worst = max(worst, abs(e - z))
    assert worst <= 0.02


def test_round_aggregation():
    rounds = [{"models": {"a": {"f1": f, "precision": f, "recall": f, "accuracy": f},
                          "b": {"f1": g, "precision": g, "recall": g, "accuracy": g}}}
              for f, g in [(0.5, 0.4), (0.6, 0.6), (0.7, 0.2), (0.4, 0.5), (0.9, 0.1),
                           (0.8, 0.3)]]
    s = summarize(rounds, ["a", "b"])
    assert s["a"]["f1"]["median"] == pytest.approx(0.65)
    assert s["a"]["f1"]["iqr"] == pytest.approx(s["a"]["f1"]["q3"] - s["a"]["f1"]["q1"])
    assert first_place_counts(rounds, ["a", "b"]) == {"a": 5, "b": 2}
    w = pairwise_wilcoxon(rounds, ["a", "b"])
    assert w[0]["n"] == 5 and 0 <= w[0]["pvalue"] <= 1
