from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from routechange.errors import InvalidConfig, SchemaMismatch, UnsortedInput, VersionMismatch
from routechange.features import (
    FeatureConfig,
    FeatureMatrix,
    apply_aggregates,
    build_features,
    feature_schema,
    fit_aggregates,
    load_sidecar,
    per_trace_stats,
    rolling_features,
    sidecar_json,
    temporal_features,
)
from routechange.ingest import Dataset, TracerouteRecord

from conftest import random_records
import oracles


def rec(rtts, sent, replies, src="a", dst="b", ts=0, label=0):
    return TracerouteRecord(src, dst, ts, tuple(rtts), sent, replies, label)


# -- per-trace statistics ---------------------------------------------------------


def test_trace_stats_three_values():
    s = per_trace_stats(rec([10, 20, 30], 3, 3))
    assert s.mean == 20.0
    assert s.variance == pytest.approx(200.0 / 3, abs=1e-12)
    assert (s.min, s.max, s.length) == (10.0, 30.0, 3)
    assert s.percentiles[50.0] == 20.0
    assert s.iqr == pytest.approx(10.0)
    assert s.success_rate == 1.0


def test_trace_stats_single_value():
    s = per_trace_stats(rec([5], 2, 1))
    assert (s.mean, s.variance, s.success_rate, s.loss_rate) == (5.0, 0.0, 0.5, 0.5)


def test_trace_stats_empty():
    s = per_trace_stats(rec([], 0, 0))
    assert (s.mean, s.variance, s.std, s.min, s.max, s.length) == (0, 0, 0, 0, 0, 0)
    assert s.iqr == 0 and s.success_rate == 0 and s.loss_rate == 0
    assert all(v == 0 for v in s.percentiles.values())


@given(st.lists(st.floats(0, 1e4, allow_nan=False), min_size=1, max_size=12),
       st.integers(1, 20))
def test_trace_stats_invariants(rtts, sent):
    s = per_trace_stats(rec(rtts, sent, min(sent, len(rtts))))
    for q in s.percentiles.values():
        assert s.min - 1e-9 <= q <= s.max + 1e-9
    assert s.iqr >= -1e-9
    assert s.success_rate + s.loss_rate == pytest.approx(1.0)


# -- temporal and rolling ---------------------------------------------------------


def test_temporal_example():
    delta, ratio, dt = temporal_features([100, 160], [[10.0], [20.0]])
    assert delta[1, 0] == 10.0
    assert ratio[1, 0] == pytest.approx(2.0, rel=1e-6)
    assert dt[1] == 60.0
    assert delta[0, 0] == ratio[0, 0] == dt[0] == 0.0


def test_temporal_ratio_clip():
    _, ratio, _ = temporal_features([0, 1], [[0.0], [5.0]])
    assert ratio[1, 0] == 100.0


def test_temporal_unsorted():
    with pytest.raises(UnsortedInput):
        temporal_features([5, 3], [[1.0], [2.0]])


def test_rolling_examples():
    out = rolling_features([0, 1, 2, 3], [[10.0], [20.0], [30.0], [40.0]])
    assert out[3][0][:, 0].tolist() == [10.0, 15.0, 20.0, 30.0]
    single = rolling_features([0], [[7.0]])
    assert single[3][0][0, 0] == 7.0 and single[3][1][0, 0] == 0.0
    const = rolling_features(range(9), [[4.0]] * 9)
    assert np.all(const[7][1] == 0.0)


# -- aggregates ---------------------------------------------------------------------


def test_aggregate_examples():
    t = fit_aggregates(["A", "A"], ["B", "C"], np.array([[10.0], [30.0]]), ["rtt_mean"])
    i = t.src.index()["A"]
    assert t.src.mean[i, 0] == 20.0 and t.src.std[i, 0] == 10.0 and t.src.rows[i] == 2
    assert t.src.distinct[i] == 2
    one = fit_aggregates(["A"], ["B"], np.array([[3.0]]), ["rtt_mean"])
    assert one.src.std[0, 0] == 0.0 and one.dst.std[0, 0] == 0.0


def test_z_score_examples():
    cfg = FeatureConfig(tracked=("rtt_mean",))
    t = fit_aggregates(["A", "A"], ["B", "B"], np.array([[15.0], [25.0]]), ["rtt_mean"])
    _, z = apply_aggregates(["A"], ["B"], np.array([[30.0]]), t, cfg)
    assert z[0, 0] == pytest.approx(2.0, rel=1e-6)
    _, z = apply_aggregates(["A"], ["B"], np.array([[20.0]]), t, cfg)
    assert z[0, 0] == 0.0
    flat = fit_aggregates(["A"], ["B"], np.array([[20.0]]), ["rtt_mean"])
    _, z = apply_aggregates(["A"], ["B"], np.array([[21.0]]), flat, cfg)
    assert z[0, 0] == 50.0


def test_unseen_keys_fall_back_to_global():
    cfg = FeatureConfig(tracked=("rtt_mean",))
    t = fit_aggregates(["A", "B"], ["X", "Y"], np.array([[10.0], [30.0]]), ["rtt_mean"])
    counts, z = apply_aggregates(["Q"], ["Z"], np.array([[40.0]]), t, cfg)
    assert counts.tolist() == [[0, 0, 0, 0]]
    assert z[0, 0] == pytest.approx(2.0, rel=1e-6) and z[0, 1] == z[0, 0]


# -- full matrix ------------------------------------------------------------------


def test_schema_width_and_order():
    names = feature_schema(FeatureConfig())
    assert len(names) == 52 and len(set(names)) == 52
    assert names[:3] == ["rtt_mean", "rtt_var", "rtt_std"]
    assert names[-1] == "zdst_success_rate"


def test_naive_oracle_on_random_rows():
    rng = np.random.default_rng(11)
    records = random_records(rng, 300)
    X, _ = build_features(Dataset(tuple(records)))
    stats = oracles.all_trace_stats(records)
    for i in range(len(records)):
        want = oracles.row_features(records, i, stats=stats)
        got = dict(zip(X.schema, X.values[i]))
        assert set(want) == set(got)
        for name, v in want.items():
            assert got[name] == pytest.approx(v, abs=1e-9, rel=1e-9), (i, name)


def test_frozen_tables_reproduce_fit():
    rng = np.random.default_rng(2)
    ds = Dataset(tuple(random_records(rng, 80)))
    X, tables = build_features(ds)
    X2, _ = build_features(ds, tables=tables)
    assert np.array_equal(X.values, X2.values)


def test_test_rows_use_train_tables():
    rng = np.random.default_rng(4)
    train = random_records(rng, 60)
    test = random_records(rng, 40, n_src=6, n_dst=6)
    _, tables = build_features(Dataset(tuple(train)))
    X, _ = build_features(Dataset(tuple(test)), tables=tables)
    for i in range(len(test)):
        want = oracles.row_features(test, i, train=train)
        for name in ("src_rows", "dst_distinct_src", "zsrc_rtt_mean", "zdst_success_rate"):
            assert X.column(name)[i] == pytest.approx(want[name], abs=1e-9)


def test_empty_rtts_row_end_to_end():
    X, _ = build_features(Dataset((rec([], 2, 0),)))
    assert np.all(np.isfinite(X.values))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matrix_finite_and_path_isolated(seed):
    rng = np.random.default_rng(seed)
    records = random_records(rng, 40, n_src=2, n_dst=2)
    X, _ = build_features(Dataset(tuple(records)))
    assert np.all(np.isfinite(X.values))
    # shuffling other paths' rows leaves this path's temporal features unchanged
    target = records[0].path
    mine = [r for r in records if r.path == target]
    others = [r for r in records if r.path != target]
    rng.shuffle(others)
    Y, _ = build_features(Dataset(tuple(mine + others)))
    path_cols = [i for i, n in enumerate(X.schema) if n.startswith(("delta", "ratio", "roll"))]
    a = X.values[[i for i, r in enumerate(records) if r.path == target]][:, path_cols]
    b = Y.values[: len(mine)][:, path_cols]
    assert np.array_equal(a, b)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.5, 500))
def test_shift_property(seed, c):
    rng = np.random.default_rng(seed)
    records = random_records(rng, 20)
    shifted = [TracerouteRecord(r.src, r.dst, r.timestamp, tuple(v + c for v in r.rtts),
                                r.probes_sent, r.replies_last_hop, r.label) for r in records]
    X, _ = build_features(Dataset(tuple(records)))
    Y, _ = build_features(Dataset(tuple(shifted)))
    has = X.column("rtt_count") > 0
    for name in ("rtt_mean", "rtt_min", "rtt_max", "rtt_p25", "rtt_p90"):
        assert np.allclose(Y.column(name)[has], X.column(name)[has] + c, atol=1e-7)
    for name in ("rtt_var", "delta_t", "success_rate"):
        assert np.allclose(Y.column(name), X.column(name), atol=1e-6)


def test_csv_roundtrip_and_sidecar():
    rng = np.random.default_rng(5)
    X, tables = build_features(Dataset(tuple(random_records(rng, 30))))
    back = FeatureMatrix.from_csv(X.to_csv())
    assert back.schema == X.schema and np.array_equal(back.values, X.values)
    assert np.array_equal(back.labels, X.labels)
    cfg, t2 = load_sidecar(sidecar_json(FeatureConfig(), tables))
    assert cfg == FeatureConfig() and t2.to_dict() == tables.to_dict()
    with pytest.raises(VersionMismatch):
        load_sidecar('{"format_version": 99}')


def test_config_validation_and_table_mismatch():
    with pytest.raises(InvalidConfig):
        FeatureConfig(epsilon=0)
    with pytest.raises(InvalidConfig):
        FeatureConfig(rolling_windows=(1,))
    with pytest.raises(InvalidConfig):
        FeatureConfig(ratio_clip=(2, 3))
    ds = Dataset((rec([1.0], 1, 1),))
    _, tables = build_features(ds)
    with pytest.raises(SchemaMismatch):
        build_features(ds, FeatureConfig(tracked=("rtt_mean",)), tables)
