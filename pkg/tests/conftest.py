from __future__ import annotations

import os

import numpy as np
import pytest

from routechange import experiment, pipeline, synth
from routechange.ingest import Dataset, TracerouteRecord

BENCH_ROUNDS = 10
BENCH_BASE_SEED = 7

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])


def random_records(rng: np.random.Generator, n_rows: int, n_src: int = 4, n_dst: int = 4,
                   labeled: bool = True, max_rtts: int = 5) -> list[TracerouteRecord]:
    """Messy rows: shared endpoints, duplicate timestamps, empty RTT lists, zero-probe traces."""
    out = []
    for _ in range(n_rows):
        sent = int(rng.integers(0, 6))
        replies = int(rng.integers(0, sent + 1))
        k = int(rng.integers(0, max_rtts + 1))
        rtts = tuple(float(v) for v in np.round(rng.uniform(0, 300, size=k), 3))
        label = int(rng.random() < 0.2) if labeled else None
        out.append(TracerouteRecord(f"s{rng.integers(n_src)}", f"d{rng.integers(n_dst)}",
                                    int(rng.integers(0, 50)) * 60, rtts, sent, replies, label))
    return out


@pytest.fixture(scope="session")
def small_synth() -> Dataset:
    return synth.generate(synth.SynthConfig(n_paths=64, obs_per_path=60, change_rate=0.05,
                                            seed=3))[0]


@pytest.fixture(scope="session")
def benchmark() -> Dataset:
    return synth.benchmark_suite()


@pytest.fixture(scope="session")
def benchmark_report(benchmark) -> dict:
    """Ten split/refit rounds of every model on the canonical benchmark (shared by criteria)."""
    return experiment.run_rounds(benchmark, pipeline.all_modes(), rounds=BENCH_ROUNDS,
                                 base_seed=BENCH_BASE_SEED, jobs=os.cpu_count() or 1)
