"""Threshold calibration, classification metrics and the Wilcoxon signed-rank test."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from .errors import AllZeroDifferences, InsufficientPairs, SingleClass

DEFAULT_GRID_STEP = 0.001
EXACT_MAX_N = 25


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class Metrics:
    counts: ConfusionCounts
    precision: float
    recall: float
    f1: float
    accuracy: float

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "accuracy": self.accuracy, **asdict(self.counts)}


def _f1(tp, fp, fn):
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return (2 * prec * rec / (prec + rec)) if prec + rec else 0.0, prec, rec


def classification_metrics(decisions, y) -> Metrics:
    d = np.asarray(decisions).astype(bool)
    t = np.asarray(y).astype(bool)
    if d.shape != t.shape:
        raise ValueError("decisions and labels differ in length")
    tp = int(np.sum(d & t))
    fp = int(np.sum(d & ~t))
    fn = int(np.sum(~d & t))
    tn = int(d.size - tp - fp - fn)
    f1, prec, rec = _f1(tp, fp, fn)
    acc = (tp + tn) / d.size if d.size else 0.0
    return Metrics(ConfusionCounts(tp, fp, tn, fn), prec, rec, f1, acc)


def threshold_grid(grid_step: float = DEFAULT_GRID_STEP) -> np.ndarray:
    steps = int(round(1.0 / grid_step))
    if steps < 1 or not math.isclose(steps * grid_step, 1.0, rel_tol=1e-9):
        raise ValueError("grid_step must divide 1")
    return np.arange(steps + 1) / steps


def f1_curve(probs, y, grid: np.ndarray) -> np.ndarray:
    """F1 of the rule ``p >= tau`` for every tau in ``grid`` (sorted ascending)."""
    p = np.asarray(probs, dtype=np.float64)
    t = np.asarray(y).astype(bool)
    order = np.argsort(p, kind="stable")
    p_sorted = p[order]
    pos_sorted = t[order].astype(np.int64)
    # suffix sums: positives among rows with p >= tau
    suffix_pos = np.concatenate([np.cumsum(pos_sorted[::-1])[::-1], [0]])
    first = np.searchsorted(p_sorted, grid, side="left")
    n_pred = p.size - first
    tp = suffix_pos[first]
    fp = n_pred - tp
    fn = int(t.sum()) - tp
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def threshold_scan(probs, y, grid_step: float = DEFAULT_GRID_STEP) -> tuple[float, float]:
    """Grid threshold maximising F1 under ``p >= tau``; ties go to the smallest tau."""
    t = np.asarray(y)
    if t.size == 0 or t.min() == t.max():
        raise SingleClass("threshold calibration needs both classes")
    if np.shape(probs) != t.shape:
        raise ValueError("probabilities and labels differ in length")
    grid = threshold_grid(grid_step)
    curve = f1_curve(probs, t, grid)
    k = int(np.argmax(curve))
    return float(grid[k]), float(curve[k])


def apply_threshold(probs, tau: float) -> np.ndarray:
    return (np.asarray(probs) >= tau).astype(np.int8)


# -- Wilcoxon signed-rank ---------------------------------------------------------


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    pvalue: float
    n: int
    method: str


def _exact_lower_tail(doubled_ranks: np.ndarray, w2: int) -> float:
    """P(T+ <= w) under the null, ranks doubled to integers; counts all 2^n sign patterns."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[int(r):] = counts[: counts.size - int(r)]
        counts += shifted
    return float(counts[: w2 + 1].sum() / 2.0 ** doubled_ranks.size)


def wilcoxon_signed_rank(a, b, method: str = "auto") -> WilcoxonResult:
    """Two-sided paired test. ``W = min(T+, T-)`` over non-zero differences.

    ``auto`` enumerates exactly for n <= 25 and otherwise uses the normal
    approximation with tie and continuity corrections.
    """
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if diff.ndim != 1:
        raise ValueError("samples must be one-dimensional and paired")
    diff = diff[diff != 0]
    n = diff.size
    if n == 0:
        raise AllZeroDifferences("all paired differences are zero")
    if n < 5:
        raise InsufficientPairs(f"need at least 5 non-zero differences, got {n}")
    ranks = rankdata(np.abs(diff), method="average")
    t_plus = float(ranks[diff > 0].sum())
    t_minus = float(ranks[diff < 0].sum())
    w = min(t_plus, t_minus)
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "approx"
    if method == "exact":
        doubled = np.rint(2 * ranks).astype(np.int64)
        p = 2.0 * _exact_lower_tail(doubled, int(round(2 * w)))
    elif method == "approx":
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
        z = min(0.0, (w - mean + 0.5) / math.sqrt(var))
        p = 2.0 * float(ndtr(z))
    else:
        raise ValueError("method must be 'auto', 'exact' or 'approx'")
    return WilcoxonResult(w, min(1.0, p), n, method)


def run_rounds(dataset, models, rounds: int = 10, base_seed: int = 0, **kw) -> dict:
    """Multi-round split/refit evaluation; see ``routechange.experiment.run_rounds``."""
    from .experiment import run_rounds as _run_rounds  # experiment imports this module

    return _run_rounds(dataset, models, rounds, base_seed, **kw)
