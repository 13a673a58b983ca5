from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from routechange import pipeline, stacking
from routechange.errors import InvalidConfig, MissingColumn, TooFewPerClass
from routechange.evaluate import apply_threshold
from routechange.features import FeatureConfig, FeatureMatrix, build_features
from routechange.gbdt import GbdtParams

FAST = {name: p.replace(n_estimators=15) for name, p in stacking.BASE_LEARNERS.items()}
FAST_META = stacking.META_PARAMS.replace(n_estimators=20)


def test_fold_example_ten_rows():
    y = np.array([1, 1] + [0] * 8)
    # below the K-per-class minimum, so check the dealing rule itself
    folds = stacking.deal_folds(y, 5, seed=0)
    assert np.bincount(folds, minlength=5).tolist() == [2] * 5
    assert np.sum(np.bincount(folds[y == 1], minlength=5) == 1) == 2
    with pytest.raises(TooFewPerClass):
        stacking.stratified_kfold(y, 5)


def test_fold_example_two_folds():
    f = stacking.stratified_kfold(np.array([0, 0, 1, 1]), 2, seed=4)
    for k in range(2):
        assert sorted(np.array([0, 0, 1, 1])[f.test_rows(k)].tolist()) == [0, 1]


def test_fold_errors():
    with pytest.raises(TooFewPerClass):
        stacking.stratified_kfold(np.array([1, 1, 1] + [0] * 10), 5)
    with pytest.raises(InvalidConfig):
        stacking.stratified_kfold(np.array([0, 1] * 4), 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(10, 300), st.floats(0.05, 0.5), st.sampled_from([2, 3, 5]),
       st.integers(0, 2**31 - 1))
def test_fold_invariants(n, rate, k, seed):
    y = (np.random.default_rng(seed).random(n) < rate).astype(int)
    if min(y.sum(), n - y.sum()) < k:
        return
    f = stacking.stratified_kfold(y, k, seed)
    assert sorted(np.concatenate([f.test_rows(i) for i in range(k)]).tolist()) == list(range(n))
    pos = np.bincount(f.folds[y == 1], minlength=k)
    assert pos.max() - pos.min() <= 1
    assert np.array_equal(stacking.stratified_kfold(y, k, seed).folds, f.folds)


def meta_sample(n=60):
    rng = np.random.default_rng(0)
    names = ("rtt_mean", "rtt_std", "rtt_p90", "success_rate", "delta_rtt_mean",
             "roll3_mean_rtt_mean", "other")
    return FeatureMatrix(names, rng.uniform(0, 1, size=(n, len(names))))


def test_meta_feature_examples():
    X = meta_sample(1)
    X.values[0, 3] = 0.5
    h = stacking.build_meta_features(np.array([[0.2, 0.4, 0.6]]), X)
    v = dict(zip(h.names, h.values[0]))
    assert len(h.names) == 3 + 6 + 6 + 6 == h.values.shape[1]
    assert v["p_mean"] == pytest.approx(0.4)
    assert v["p_std"] == pytest.approx(0.1633, abs=1e-4)
    assert v["p_median"] == pytest.approx(0.4)
    assert [v["absdiff_p1_p2"], v["absdiff_p1_p3"], v["absdiff_p2_p3"]] == pytest.approx(
        [0.2, 0.4, 0.2])
    assert v["p1_x_success_rate"] == pytest.approx(0.1)
    assert [v["p1_sq"], v["p2_sq"], v["p3_sq"]] == pytest.approx([0.04, 0.16, 0.36])
    flat = stacking.build_meta_features(np.array([[0.5, 0.5, 0.5]]), X)
    fv = dict(zip(flat.names, flat.values[0]))
    assert fv["p_std"] == 0 and fv["absdiff_p1_p2"] == fv["absdiff_p2_p3"] == 0


def test_meta_features_missing_column():
    X = FeatureMatrix(("a",), np.zeros((2, 1)))
    with pytest.raises(MissingColumn):
        stacking.build_meta_features(np.zeros((2, 3)), X)


@pytest.fixture(scope="module")
def small_xy(small_synth):
    X, tables = build_features(small_synth)
    return X, X.labels, tables


def test_oof_structure(small_xy, monkeypatch):
    X, y, _ = small_xy
    seen = []
    real = stacking._fit_fold

    def spy(X_, y_, params, train, test):
        seen.append((set(train.tolist()), set(test.tolist())))
        return real(X_, y_, params, train, test)

    monkeypatch.setattr(stacking, "_fit_fold", spy)
    folds = stacking.stratified_kfold(y, 5, 1)
    oof = stacking.generate_oof(FAST, X, y, folds, seed=1)
    assert len(seen) == 15
    for train, test in seen:
        assert not train & test and len(train) == len(X) - len(test)
    for li in range(3):
        for f in range(5):
            rows = folds.test_rows(f)
            assert np.array_equal(oof.probs[rows, li], oof.models[li][f].predict_proba(X.take(rows)))
    assert np.all((oof.probs > 0) & (oof.probs < 1))
    avg = oof.fold_average(X, 0)[:, 0]
    assert np.allclose(avg, np.mean([m.predict_proba(X) for m in oof.models[0]], axis=0))


def test_stacked_determinism_roundtrip_and_single_reuse(small_xy):
    X, y, tables = small_xy
    kw = dict(base_configs=FAST, meta_params=FAST_META, seed=3)
    a = stacking.fit_stacked_features(X, y, FeatureConfig(), tables, **kw)
    b = stacking.fit_stacked_features(X, y, FeatureConfig(), tables, **kw)
    blob = stacking.serialize(a)
    assert blob == stacking.serialize(b)
    back = stacking.deserialize(blob)
    assert np.array_equal(stacking.stacked_proba_features(back, X),
                          stacking.stacked_proba_features(a, X))
    assert 0.0 <= a.tau <= 1.0 and back.tau == a.tau
    # the stack's learner fold-sets equal fitting that learner on its own
    alone = stacking.generate_oof({"depth6": FAST["depth6"]}, X, y,
                                  stacking.stratified_kfold(y, 5, 3), seed=3)
    from_stack = pipeline.single_from_stack(a, "depth6")
    assert np.array_equal(from_stack.proba_features(X), alone.fold_average(X)[:, 0])


def test_in_sample_threshold_mode_and_hyperopt(small_xy):
    X, y, tables = small_xy
    m = stacking.fit_stacked_features(X, y, FeatureConfig(), tables, base_configs=FAST,
                                      meta_params=FAST_META.replace(n_estimators=5),
                                      threshold_mode="paper", hyperopt_trials=2, seed=0)
    assert m.info["threshold_mode"] == "paper" and m.info["hyperopt"]["trials"] == 2
    assert len(m.diagnostics["history"].trials) == 2
    with pytest.raises(InvalidConfig):
        stacking.fit_stacked_features(X, y, FeatureConfig(), tables, threshold_mode="x")


def test_threshold_boundaries():
    p = np.array([0.0, 0.3, 0.999, 1.0])
    assert apply_threshold(p, 1.0).tolist() == [0, 0, 0, 1]
    assert apply_threshold(p, 0.0).tolist() == [1, 1, 1, 1]
    with pytest.raises(InvalidConfig):
        stacking.StackedModel(FeatureConfig(), None, (), [], None, 1.5)


def test_predict_dataset(small_synth):
    m = stacking.train_stacked(small_synth, base_configs=FAST, meta_params=FAST_META)
    probs, decisions = stacking.predict_stacked(m, small_synth)
    assert probs.shape == decisions.shape == (len(small_synth),)
    assert np.array_equal(decisions, (probs >= m.tau).astype(decisions.dtype))


def test_custom_learner_sequence(small_xy):
    X, y, _ = small_xy
    oof = stacking.generate_oof([GbdtParams(n_estimators=3)] * 2, X, y,
                                stacking.stratified_kfold(y, 3, 0))
    assert oof.names == ("learner0", "learner1") and oof.probs.shape == (len(X), 2)
