"""Feature engineering: raw traceroute rows -> finite feature vectors.

Four blocks are concatenated per row, in this column order:

1. per-trace statistics of the RTT list and probe counters;
2. temporal context against the previous row of the same (src, dst) path
   (difference, clipped ratio, elapsed seconds);
3. rolling mean/std over the current row and its predecessors on the path;
4. source/destination context: row counts, distinct counterparts and
   z-scores against per-key statistics fitted on training rows.

Everything is vectorised over the whole dataset; rows are processed in
(path, timestamp) order internally and returned in input order.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    EmptyInput,
    InvalidConfig,
    MissingColumn,
    SchemaMismatch,
    UnsortedInput,
    VersionMismatch,
)
from .ingest import Dataset, TracerouteRecord

SIDECAR_VERSION = 1


@dataclass(frozen=True)
class FeatureConfig:
    epsilon: float = 1e-6
    ratio_clip: tuple[float, float] = (0.01, 100.0)
    z_clip: tuple[float, float] = (-50.0, 50.0)
    rolling_windows: tuple[int, ...] = (3, 7)
    percentiles: tuple[float, ...] = (25.0, 50.0, 75.0, 90.0)
    tracked: tuple[str, ...] = ("rtt_mean", "rtt_std", "rtt_p90", "success_rate")

    def __post_init__(self):
        object.__setattr__(self, "ratio_clip", tuple(float(v) for v in self.ratio_clip))
        object.__setattr__(self, "z_clip", tuple(float(v) for v in self.z_clip))
        object.__setattr__(self, "rolling_windows", tuple(int(w) for w in self.rolling_windows))
        object.__setattr__(self, "percentiles", tuple(float(p) for p in self.percentiles))
        object.__setattr__(self, "tracked", tuple(self.tracked))
        if not self.epsilon > 0:
            raise InvalidConfig("epsilon must be > 0")
        lo, hi = self.ratio_clip
        if not lo <= 1.0 <= hi:
            raise InvalidConfig("ratio_clip must contain 1")
        lo, hi = self.z_clip
        if not lo <= 0.0 <= hi:
            raise InvalidConfig("z_clip must contain 0")
        if any(w < 2 for w in self.rolling_windows):
            raise InvalidConfig("rolling windows must be >= 2")
        if any(not 0.0 < p < 100.0 for p in self.percentiles):
            raise InvalidConfig("percentile ranks must lie in (0, 100)")
        known = set(trace_stat_names(self))
        for name in self.tracked:
            if name not in known:
                raise InvalidConfig(f"tracked feature {name!r} is not a per-trace statistic")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _pct_name(p: float) -> str:
    return f"rtt_p{p:g}"


def trace_stat_names(config: FeatureConfig) -> list[str]:
    return (
        ["rtt_mean", "rtt_var", "rtt_std", "rtt_min", "rtt_max", "rtt_count"]
        + [_pct_name(p) for p in config.percentiles]
        + ["rtt_iqr", "success_rate", "loss_rate", "probes_sent", "replies_last_hop"]
    )


def feature_schema(config: FeatureConfig) -> list[str]:
    """Column names of the full feature vector, in output order."""
    t = config.tracked
    names = list(trace_stat_names(config))
    names += [f"delta_{x}" for x in t] + [f"ratio_{x}" for x in t] + ["delta_t"]
    for w in config.rolling_windows:
        for x in t:
            names += [f"roll{w}_mean_{x}", f"roll{w}_std_{x}"]
    names += ["src_rows", "src_distinct_dst", "dst_rows", "dst_distinct_src"]
    names += [f"zsrc_{x}" for x in t] + [f"zdst_{x}" for x in t]
    return names


def schema_fingerprint(schema: Sequence[str]) -> str:
    return hashlib.sha256("\x1f".join(schema).encode("utf-8")).hexdigest()[:16]


@dataclass
class FeatureMatrix:
    schema: tuple[str, ...]
    values: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.schema = tuple(self.schema)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.schema):
            raise SchemaMismatch(
                f"values shape {self.values.shape} does not match {len(self.schema)} columns"
            )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int8)
            if self.labels.shape != (self.values.shape[0],):
                raise SchemaMismatch("labels length does not match row count")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def fingerprint(self) -> str:
        return schema_fingerprint(self.schema)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.schema.index(name)]
        except ValueError:
            raise MissingColumn(name) from None

    def select(self, names: Sequence[str]) -> np.ndarray:
        idx = []
        for name in names:
            if name not in self.schema:
                raise MissingColumn(name)
            idx.append(self.schema.index(name))
        return self.values[:, idx]

    def take(self, rows: np.ndarray) -> "FeatureMatrix":
        labels = None if self.labels is None else self.labels[rows]
        return FeatureMatrix(self.schema, self.values[rows], labels)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        header = list(self.schema) + (["route_changed"] if self.labels is not None else [])
        w.writerow(header)
        for i, row in enumerate(self.values):
            cells = [repr(float(v)) for v in row]
            if self.labels is not None:
                cells.append(int(self.labels[i]))
            w.writerow(cells)
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "FeatureMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        header = rows[0]
        has_labels = header[-1] == "route_changed"
        schema = header[:-1] if has_labels else header
        body = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
        body = body.reshape(len(rows) - 1, len(header))
        labels = body[:, -1].astype(np.int8) if has_labels else None
        return cls(tuple(schema), body[:, : len(schema)], labels)


@dataclass
class TraceStats:
    mean: float
    variance: float
    std: float
    min: float
    max: float
    length: int
    percentiles: dict[float, float]
    iqr: float
    success_rate: float
    loss_rate: float


# -- per-trace statistics ----------------------------------------------------


def _interp_percentile(sorted_rows: np.ndarray, lengths: np.ndarray, q: float) -> np.ndarray:
    """Linear interpolation between order statistics, inclusive ranks."""
    n = lengths.size
    out = np.zeros(n)
    has = lengths > 0
    if not has.any():
        return out
    rows = np.nonzero(has)[0]
    pos = (lengths[has] - 1) * (q / 100.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, lengths[has] - 1)
    frac = pos - lo
    a = sorted_rows[rows, lo]
    b = sorted_rows[rows, hi]
    out[has] = a + frac * (b - a)
    return out


def trace_stats_matrix(rtt_lists: Sequence[Sequence[float]], probes_sent: np.ndarray,
                       replies: np.ndarray, config: FeatureConfig) -> np.ndarray:
    """Per-trace statistic block for many rows at once; columns follow ``trace_stat_names``."""
    n = len(rtt_lists)
    lengths = np.fromiter((len(r) for r in rtt_lists), dtype=np.int64, count=n)
    width = int(lengths.max()) if n else 0
    padded = np.full((n, max(width, 1)), np.inf)
    if width:
        flat = np.fromiter((v for r in rtt_lists for v in r), dtype=np.float64,
                           count=int(lengths.sum()))
        row_idx = np.repeat(np.arange(n), lengths)
        starts = np.cumsum(lengths) - lengths
        col_idx = np.arange(flat.size) - np.repeat(starts, lengths)
        padded[row_idx, col_idx] = flat
    padded.sort(axis=1)
    valid = np.arange(padded.shape[1])[None, :] < lengths[:, None]
    has = lengths > 0
    safe_len = np.where(has, lengths, 1)
    filled = np.where(valid, padded, 0.0)
    mean = filled.sum(axis=1) / safe_len
    dev = np.where(valid, padded - mean[:, None], 0.0)
    var = (dev * dev).sum(axis=1) / safe_len
    mean[~has] = 0.0
    var[~has] = 0.0
    mn = np.where(has, padded[:, 0], 0.0)
    mx = np.where(has, padded[np.arange(n), np.maximum(lengths - 1, 0)], 0.0)
    pcts = [_interp_percentile(padded, lengths, q) for q in config.percentiles]
    iqr = _interp_percentile(padded, lengths, 75.0) - _interp_percentile(padded, lengths, 25.0)
    sent = np.asarray(probes_sent, dtype=np.float64)
    rep = np.asarray(replies, dtype=np.float64)
    success = np.divide(rep, sent, out=np.zeros(n), where=sent > 0)
    loss = np.where(sent > 0, 1.0 - success, 0.0)
    cols = [mean, var, np.sqrt(var), mn, mx, lengths.astype(np.float64), *pcts, iqr,
            success, loss, sent, rep]
    return np.column_stack(cols) if n else np.zeros((0, len(cols)))


def per_trace_stats(record: TracerouteRecord, config: FeatureConfig = FeatureConfig()) -> TraceStats:
    row = trace_stats_matrix([record.rtts], np.array([record.probes_sent]),
                             np.array([record.replies_last_hop]), config)[0]
    names = trace_stat_names(config)
    v = dict(zip(names, row))
    return TraceStats(
        mean=v["rtt_mean"], variance=v["rtt_var"], std=v["rtt_std"], min=v["rtt_min"],
        max=v["rtt_max"], length=int(v["rtt_count"]),
        percentiles={p: v[_pct_name(p)] for p in config.percentiles},
        iqr=v["rtt_iqr"], success_rate=v["success_rate"], loss_rate=v["loss_rate"],
    )


# -- path-level context ----------------------------------------------------------


def _group_starts(group: np.ndarray) -> np.ndarray:
    """For rows sorted by group, the position of the first row of each row's group."""
    n = group.size
    first = np.ones(n, dtype=bool)
    first[1:] = group[1:] != group[:-1]
    return np.maximum.accumulate(np.where(first, np.arange(n), 0))


def _temporal_sorted(group, timestamps, values, config):
    n, k = values.shape
    first = np.ones(n, dtype=bool)
    first[1:] = group[1:] != group[:-1]
    prev = np.roll(values, 1, axis=0)
    delta = np.where(first[:, None], 0.0, values - prev)
    lo, hi = config.ratio_clip
    ratio = np.clip(values / (prev + config.epsilon), lo, hi)
    ratio = np.where(first[:, None], 0.0, ratio)
    ts = np.asarray(timestamps, dtype=np.float64)
    dt = np.where(first, 0.0, ts - np.roll(ts, 1))
    return delta, ratio, dt


def _rolling_sorted(group, values, windows):
    n, k = values.shape
    starts = _group_starts(group)
    pos = np.arange(n)
    out = {}
    for w in windows:
        total = np.zeros((n, k))
        count = np.zeros(n)
        lagged = []
        for lag in range(w):
            ok = pos - lag >= starts
            src = np.maximum(pos - lag, 0)
            lagged.append((ok, src))
            total += np.where(ok[:, None], values[src], 0.0)
            count += ok
        mean = total / count[:, None]
        ss = np.zeros((n, k))
        for ok, src in lagged:
            d = np.where(ok[:, None], values[src] - mean, 0.0)
            ss += d * d
        out[w] = (mean, np.sqrt(ss / count[:, None]))
    return out


def _check_sorted(timestamps) -> np.ndarray:
    ts = np.asarray(timestamps)
    if ts.size > 1 and np.any(ts[1:] < ts[:-1]):
        raise UnsortedInput("path rows must be sorted by non-decreasing timestamp")
    return ts


def temporal_features(timestamps, values, config: FeatureConfig = FeatureConfig()):
    """Difference, clipped ratio and elapsed time against the previous row of one path.

    ``values`` is ``(n, k)`` with one column per tracked feature. Returns
    ``(delta, ratio, delta_t)``; the first row is all zeros.
    """
    ts = _check_sorted(timestamps)
    vals = np.atleast_2d(np.asarray(values, dtype=np.float64).T).T
    return _temporal_sorted(np.zeros(ts.size, dtype=np.int64), ts, vals, config)


def rolling_features(timestamps, values, config: FeatureConfig = FeatureConfig()):
    """Rolling mean and population std per window, ``{w: (mean, std)}`` with ``(n, k)`` arrays."""
    ts = _check_sorted(timestamps)
    vals = np.atleast_2d(np.asarray(values, dtype=np.float64).T).T
    return _rolling_sorted(np.zeros(ts.size, dtype=np.int64), vals, config.rolling_windows)


# -- source / destination aggregates ---------------------------------------------------


@dataclass
class KeyTable:
    keys: list[str]
    rows: np.ndarray  # (m,)
    distinct: np.ndarray  # (m,)
    mean: np.ndarray  # (m, k)
    std: np.ndarray  # (m, k)
    _index: dict = field(default=None, repr=False, compare=False)

    def index(self) -> dict[str, int]:
        if self._index is None:
            self._index = {k: i for i, k in enumerate(self.keys)}
        return self._index

    def to_dict(self) -> dict:
        return {
            "keys": list(self.keys),
            "rows": self.rows.tolist(),
            "distinct": self.distinct.tolist(),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict, k: int) -> "KeyTable":
        m = len(d["keys"])
        return cls(
            keys=list(d["keys"]),
            rows=np.asarray(d["rows"], dtype=np.int64),
            distinct=np.asarray(d["distinct"], dtype=np.int64),
            mean=np.asarray(d["mean"], dtype=np.float64).reshape(m, k),
            std=np.asarray(d["std"], dtype=np.float64).reshape(m, k),
        )


@dataclass
class AggregateTables:
    tracked: tuple[str, ...]
    src: KeyTable
    dst: KeyTable
    global_mean: np.ndarray
    global_std: np.ndarray

    def to_dict(self) -> dict:
        return {
            "tracked": list(self.tracked),
            "src": self.src.to_dict(),
            "dst": self.dst.to_dict(),
            "global_mean": self.global_mean.tolist(),
            "global_std": self.global_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AggregateTables":
        k = len(d["tracked"])
        return cls(
            tracked=tuple(d["tracked"]),
            src=KeyTable.from_dict(d["src"], k),
            dst=KeyTable.from_dict(d["dst"], k),
            global_mean=np.asarray(d["global_mean"], dtype=np.float64),
            global_std=np.asarray(d["global_std"], dtype=np.float64),
        )


def _key_table(keys: np.ndarray, other: np.ndarray, values: np.ndarray) -> KeyTable:
    uniq, inv = np.unique(keys, return_inverse=True)
    m = uniq.size
    counts = np.bincount(inv, minlength=m)
    _, other_inv = np.unique(other, return_inverse=True)
    pairs = np.unique(np.stack([inv, other_inv], axis=1), axis=0)
    distinct = np.bincount(pairs[:, 0], minlength=m)
    k = values.shape[1]
    mean = np.empty((m, k))
    std = np.empty((m, k))
    for j in range(k):
        mean[:, j] = np.bincount(inv, weights=values[:, j], minlength=m) / counts
        dev = values[:, j] - mean[inv, j]
        std[:, j] = np.sqrt(np.bincount(inv, weights=dev * dev, minlength=m) / counts)
    return KeyTable([str(u) for u in uniq], counts.astype(np.int64),
                    distinct.astype(np.int64), mean, std)


def fit_aggregates(src: Sequence[str], dst: Sequence[str], values: np.ndarray,
                   tracked: Sequence[str]) -> AggregateTables:
    """Per-source and per-destination counts, means and population stds of tracked features."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if values.shape[0] == 0:
        raise EmptyInput("cannot fit aggregates on zero rows")
    src = np.asarray(src, dtype=object)
    dst = np.asarray(dst, dtype=object)
    gmean = values.mean(axis=0)
    gstd = np.sqrt(((values - gmean) ** 2).mean(axis=0))
    return AggregateTables(tuple(tracked), _key_table(src, dst, values),
                           _key_table(dst, src, values), gmean, gstd)


def _lookup(table: KeyTable, keys: Sequence[str]) -> np.ndarray:
    index = table.index()
    return np.fromiter((index.get(k, -1) for k in keys), dtype=np.int64, count=len(keys))


def apply_aggregates(src: Sequence[str], dst: Sequence[str], values: np.ndarray,
                     tables: AggregateTables, config: FeatureConfig = FeatureConfig()):
    """Count features ``(n, 4)`` and clipped z-scores ``(n, 2k)`` (source block, then destination).

    Keys not seen at fit time fall back to the global statistics and zero counts.
    """
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    n = values.shape[0]
    lo, hi = config.z_clip
    counts = np.zeros((n, 4))
    zs = []
    for t_idx, (table, keys) in enumerate(((tables.src, src), (tables.dst, dst))):
        pos = _lookup(table, keys)
        seen = pos >= 0
        safe = np.where(seen, pos, 0)
        if table.keys:
            mu = np.where(seen[:, None], table.mean[safe], tables.global_mean)
            sd = np.where(seen[:, None], table.std[safe], tables.global_std)
            counts[:, 2 * t_idx] = np.where(seen, table.rows[safe], 0)
            counts[:, 2 * t_idx + 1] = np.where(seen, table.distinct[safe], 0)
        else:
            mu = np.broadcast_to(tables.global_mean, values.shape)
            sd = np.broadcast_to(tables.global_std, values.shape)
        zs.append(np.clip((values - mu) / (sd + config.epsilon), lo, hi))
    return counts, np.hstack(zs)


# -- full pipeline -------------------------------------------------------------


def build_features(dataset: Dataset, config: FeatureConfig = FeatureConfig(),
                   tables: AggregateTables | None = None) -> tuple[FeatureMatrix, AggregateTables]:
    """Full feature matrix for ``dataset``, rows in input order.

    With ``tables=None`` the aggregate tables are fitted on ``dataset`` and
    returned; otherwise the supplied tables are applied unchanged.
    """
    records = dataset.records
    n = len(records)
    if n == 0:
        raise EmptyInput("dataset has no records")
    src = [r.src for r in records]
    dst = [r.dst for r in records]
    ts = np.fromiter((r.timestamp for r in records), dtype=np.int64, count=n)
    stats = trace_stats_matrix(
        [r.rtts for r in records],
        np.fromiter((r.probes_sent for r in records), dtype=np.int64, count=n),
        np.fromiter((r.replies_last_hop for r in records), dtype=np.int64, count=n),
        config,
    )
    names = trace_stat_names(config)
    tracked = stats[:, [names.index(x) for x in config.tracked]]

    path_keys = np.array([f"{a}\x00{b}" for a, b in zip(src, dst)], dtype=object)
    _, group = np.unique(path_keys, return_inverse=True)
    order = np.lexsort((np.arange(n), ts, group))
    g_sorted = group[order]
    v_sorted = tracked[order]
    delta, ratio, dt = _temporal_sorted(g_sorted, ts[order], v_sorted, config)
    rolling = _rolling_sorted(g_sorted, v_sorted, config.rolling_windows)
    roll_blocks = []
    for w in config.rolling_windows:
        mean, std = rolling[w]
        inter = np.empty((n, 2 * mean.shape[1]))
        inter[:, 0::2] = mean
        inter[:, 1::2] = std
        roll_blocks.append(inter)
    path_block_sorted = np.hstack([delta, ratio, dt[:, None], *roll_blocks])
    path_block = np.empty_like(path_block_sorted)
    path_block[order] = path_block_sorted

    if tables is None:
        tables = fit_aggregates(src, dst, tracked, config.tracked)
    elif tuple(tables.tracked) != tuple(config.tracked):
        raise SchemaMismatch("aggregate tables were fitted for different tracked features")
    counts, z = apply_aggregates(src, dst, tracked, tables, config)

    values = np.hstack([stats, path_block, counts, z])
    if not np.all(np.isfinite(values)):
        raise ValueError("feature engine produced non-finite values")
    labels = dataset.labels() if dataset.labeled else None
    return FeatureMatrix(tuple(feature_schema(config)), values, labels), tables


def sidecar_json(config: FeatureConfig, tables: AggregateTables) -> str:
    return json.dumps(
        {"format_version": SIDECAR_VERSION, "config": config.to_dict(), "tables": tables.to_dict()},
        sort_keys=True,
    )


def load_sidecar(text: str) -> tuple[FeatureConfig, AggregateTables]:
    d = json.loads(text)
    if d.get("format_version") != SIDECAR_VERSION:
        raise VersionMismatch(f"unsupported sidecar version {d.get('format_version')!r}")
    return FeatureConfig.from_dict(d["config"]), AggregateTables.from_dict(d["tables"])
