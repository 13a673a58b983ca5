"""Seeded synthetic traceroutes with known route-change labels.

Each path is piecewise stationary. A regime fixes the latency level, the
jitter (Gaussian RTT spread) and a per-probe loss probability. At every row
after the first, a new regime starts with probability ``change_rate``; that
row is labeled 1. Most changes move the level by a draw from
``latency_shift_range`` while a ``subtle_fraction`` of them moves it by less
than the current jitter, so the detection task stays imperfect. The
change row also suffers ``loss_bump`` extra loss.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidConfig
from .ingest import Dataset, TracerouteRecord

BENCHMARK_VERSION = "bench-v1"
BENCHMARK_SEED = 7
START_EPOCH = 1_600_000_000
BASE_LATENCY = (10.0, 200.0)
LOSS_RANGE = (0.0, 0.05)
GAP_RANGE = (300, 900)


@dataclass(frozen=True)
class SynthConfig:
    n_paths: int = 100
    obs_per_path: int = 100
    change_rate: float = 0.02
    latency_shift_range: tuple[float, float] = (5.0, 50.0)
    jitter_range: tuple[float, float] = (0.5, 5.0)
    loss_bump: float = 0.1
    probes_per_trace: float = 1.44
    subtle_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "latency_shift_range", tuple(map(float, self.latency_shift_range)))
        object.__setattr__(self, "jitter_range", tuple(map(float, self.jitter_range)))
        if self.n_paths < 1 or self.obs_per_path < 1:
            raise InvalidConfig("n_paths and obs_per_path must be >= 1")
        if not 0.0 < self.change_rate < 1.0:
            raise InvalidConfig("change_rate must lie in (0, 1)")
        for name in ("latency_shift_range", "jitter_range"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi:
                raise InvalidConfig(f"{name} must be a positive interval")
        if not 0.0 <= self.loss_bump <= 1.0:
            raise InvalidConfig("loss_bump must lie in [0, 1]")
        if self.probes_per_trace < 1.0:
            raise InvalidConfig("probes_per_trace must be >= 1")
        if not 0.0 <= self.subtle_fraction <= 1.0:
            raise InvalidConfig("subtle_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["latency_shift_range"] = list(self.latency_shift_range)
        d["jitter_range"] = list(self.jitter_range)
        return d


@dataclass(frozen=True)
class Regime:
    start: int
    mean: float
    jitter: float
    loss: float
    subtle: bool = False


@dataclass
class PathTruth:
    src: str
    dst: str
    regimes: list[Regime]

    @property
    def change_timestamps(self) -> list[int]:
        return [r.start for r in self.regimes[1:]]


@dataclass
class GroundTruth:
    labels: np.ndarray
    paths: list[PathTruth]
    config: SynthConfig
    version: str | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "config": self.config.to_dict(),
            "n_rows": int(self.labels.size),
            "n_positive": int(self.labels.sum()),
            "paths": [{"src": p.src, "dst": p.dst,
                       "change_timestamps": p.change_timestamps,
                       "regimes": [asdict(r) for r in p.regimes]} for p in self.paths],
        }


def _endpoints(n_paths: int) -> list[tuple[int, int]]:
    # unique (src, dst) pairs on a near-square grid so both sides are shared by several paths
    n_src = max(1, math.isqrt(n_paths))
    return [(i % n_src, i // n_src) for i in range(n_paths)]


def _endpoint_offsets(seed: int, n: int, stream: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 2**31 + stream])
    return rng.uniform(0.0, 0.5, size=n)


def _generate_path(config: SynthConfig, index: int, src: str, dst: str, level: float):
    rng = np.random.default_rng([config.seed, index])
    jlo, jhi = config.jitter_range
    slo, shi = config.latency_shift_range
    extra_probes = config.probes_per_trace - 1.0
    regime = Regime(0, level, rng.uniform(jlo, jhi), rng.uniform(*LOSS_RANGE))
    ts = START_EPOCH + int(rng.integers(0, 86_400))
    regimes = []
    records = []
    for t in range(config.obs_per_path):
        if t > 0:
            ts += int(rng.integers(GAP_RANGE[0], GAP_RANGE[1] + 1))
        changed = t > 0 and rng.random() < config.change_rate
        if changed:
            subtle = rng.random() < config.subtle_fraction
            if subtle:
                shift = rng.uniform(0.1, 1.0) * regime.jitter
            else:
                shift = rng.uniform(slo, shi)
            sign = 1.0 if rng.random() < 0.5 else -1.0
            if regime.mean + sign * shift < 1.0:
                sign = 1.0
            regime = Regime(ts, regime.mean + sign * shift, rng.uniform(jlo, jhi),
                            rng.uniform(*LOSS_RANGE), subtle)
        if t == 0:
            regime = Regime(ts, regime.mean, regime.jitter, regime.loss)
        if t == 0 or changed:
            regimes.append(regime)
        sent = 1 + int(rng.poisson(extra_probes))
        loss = min(1.0, regime.loss + (config.loss_bump if changed else 0.0))
        replies = int(rng.binomial(sent, 1.0 - loss))
        rtts = np.round(np.maximum(rng.normal(regime.mean, regime.jitter, size=replies), 0.0), 3)
        records.append(TracerouteRecord(src, dst, ts, tuple(float(v) for v in rtts), sent,
                                        replies, 1 if changed else 0))
    return records, PathTruth(src, dst, regimes)


def generate(config: SynthConfig) -> tuple[Dataset, GroundTruth]:
    """Dataset (path after path, each in time order) and its regime ground truth."""
    pairs = _endpoints(config.n_paths)
    n_src = max(s for s, _ in pairs) + 1
    n_dst = max(d for _, d in pairs) + 1
    lo, hi = BASE_LATENCY
    src_off = _endpoint_offsets(config.seed, n_src, 0)
    dst_off = _endpoint_offsets(config.seed, n_dst, 1)
    records: list[TracerouteRecord] = []
    truths: list[PathTruth] = []
    for i, (s, d) in enumerate(pairs):
        level = lo + (hi - lo) * (src_off[s] + dst_off[d])
        recs, truth = _generate_path(config, i, f"src{s:03d}", f"dst{d:03d}", level)
        records.extend(recs)
        truths.append(truth)
    labels = np.fromiter((r.label for r in records), dtype=np.int8, count=len(records))
    return Dataset(tuple(records)), GroundTruth(labels, truths, config)


def benchmark_config(seed: int = BENCHMARK_SEED) -> SynthConfig:
    return SynthConfig(n_paths=500, obs_per_path=100, change_rate=0.02, seed=seed)


def benchmark_with_truth(seed: int = BENCHMARK_SEED) -> tuple[Dataset, GroundTruth]:
    dataset, truth = generate(benchmark_config(seed))
    truth.version = BENCHMARK_VERSION
    return dataset, truth


def benchmark_suite(seed: int = BENCHMARK_SEED) -> Dataset:
    """Canonical 500 x 100 benchmark (suite ``BENCHMARK_VERSION``)."""
    return benchmark_with_truth(seed)[0]
