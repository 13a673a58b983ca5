"""Repeated split/refit evaluation and the JSON report it produces.

Round ``r`` uses seed ``base_seed + r`` for the path-grouped split and for every
fit inside the round. Single base learners are taken from the round's stacked
model (their fold-models and OOF-calibrated thresholds), which gives the same
models as fitting each learner alone.
"""
from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass

import numpy as np

from . import pipeline, stacking
from .errors import AllZeroDifferences, InsufficientPairs, InvalidConfig
from .evaluate import apply_threshold, classification_metrics, wilcoxon_signed_rank
from .features import FeatureConfig, FeatureMatrix, build_features
from .ingest import DEFAULT_TRAIN_FRACTION, Dataset, split

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
TIMING_KEY = "timing"


@dataclass(frozen=True)
class RoundSpec:
    models: tuple[str, ...]
    k: int = stacking.DEFAULT_FOLDS
    threshold_mode: str = "oof"
    train_fraction: float = DEFAULT_TRAIN_FRACTION
    hyperopt_trials: int = 0


def model_metrics(probs: np.ndarray, y: np.ndarray, tau: float) -> dict:
    m = classification_metrics(apply_threshold(probs, tau), y).to_dict()
    m["tau"] = float(tau)
    m["f1_at_0.5"] = classification_metrics(apply_threshold(probs, 0.5), y).f1
    return m


def _fit_round(X: FeatureMatrix, y, config: FeatureConfig, tables, spec: RoundSpec, seed: int,
               jobs: int) -> dict:
    fitted = {}
    singles = [m for m in spec.models if m.startswith("single:")]
    stack = None
    if "stacked" in spec.models or singles:
        stack = stacking.fit_stacked_features(X, y, config, tables, k=spec.k, seed=seed,
                                              threshold_mode=spec.threshold_mode,
                                              hyperopt_trials=spec.hyperopt_trials, jobs=jobs)
    for mode in spec.models:
        family, name = pipeline.parse_mode(mode)
        if family == "stacked":
            fitted[mode] = stack
        elif family == "single":
            if spec.threshold_mode == "oof":
                fitted[mode] = pipeline.single_from_stack(stack, name)
            else:
                fitted[mode] = pipeline.fit_single_features(X, y, name, config, tables, spec.k,
                                                            seed, spec.threshold_mode, jobs)
        else:
            fitted[mode] = pipeline.fit_baseline_features(X, y, name, config, tables, spec.k,
                                                          seed, spec.threshold_mode)
    return fitted


def run_round(dataset: Dataset, spec: RoundSpec, seed: int,
              feature_config: FeatureConfig = FeatureConfig(), jobs: int = 1) -> dict:
    train, test = split(dataset, spec.train_fraction, seed)
    X, tables = build_features(train, feature_config)
    Xt, _ = build_features(test, feature_config, tables)
    fitted = _fit_round(X, X.labels, feature_config, tables, spec, seed, jobs)
    models = {}
    for mode in spec.models:
        probs = pipeline.predict_proba_features(fitted[mode], Xt)
        models[mode] = model_metrics(probs, Xt.labels, fitted[mode].tau)
    return {"seed": seed, "n_train": len(X), "n_test": len(Xt),
            "n_test_positive": int(Xt.labels.sum()), "models": models}


def _timed_round(dataset, spec, seed, feature_config, jobs):
    t0 = time.perf_counter()
    result = run_round(dataset, spec, seed, feature_config, jobs)
    return result, time.perf_counter() - t0


def _quartiles(values) -> dict:
    q1, med, q3 = np.percentile(np.asarray(values, dtype=np.float64), [25, 50, 75])
    return {"median": float(med), "q1": float(q1), "q3": float(q3), "iqr": float(q3 - q1)}


def summarize(rounds: list[dict], models) -> dict:
    summary = {}
    for mode in models:
        f1 = [r["models"][mode]["f1"] for r in rounds]
        entry = {"f1": _quartiles(f1), "f1_values": f1}
        for metric in ("precision", "recall", "accuracy"):
            entry[metric] = _quartiles([r["models"][mode][metric] for r in rounds])
        summary[mode] = entry
    return summary


def first_place_counts(rounds: list[dict], models) -> dict:
    """Rounds in which each model's F1 is at least every other model's (ties share first)."""
    counts = {m: 0 for m in models}
    for r in rounds:
        best = max(r["models"][m]["f1"] for m in models)
        for m in models:
            if r["models"][m]["f1"] >= best:
                counts[m] += 1
    return counts


def pairwise_wilcoxon(rounds: list[dict], models) -> list[dict]:
    out = []
    for a, b in itertools.combinations(models, 2):
        fa = [r["models"][a]["f1"] for r in rounds]
        fb = [r["models"][b]["f1"] for r in rounds]
        entry = {"a": a, "b": b}
        try:
            res = wilcoxon_signed_rank(fa, fb)
            entry.update(statistic=res.statistic, pvalue=res.pvalue, n=res.n, method=res.method)
        except (AllZeroDifferences, InsufficientPairs) as exc:
            entry.update(statistic=None, pvalue=None, error=type(exc).__name__)
        out.append(entry)
    return out


def run_rounds(dataset: Dataset, models, rounds: int = 10, base_seed: int = 0,
               feature_config: FeatureConfig = FeatureConfig(), jobs: int = 1,
               spec: RoundSpec | None = None, run_config: dict | None = None) -> dict:
    """Evaluate ``models`` over ``rounds`` independent split/refit rounds."""
    if rounds < 1:
        raise InvalidConfig("rounds must be >= 1")
    models = tuple(models)
    for m in models:
        pipeline.parse_mode(m)
    spec = spec or RoundSpec(models)
    start = time.perf_counter()
    if jobs > 1 and rounds > 1:
        # rounds are independent; parallelising them scales better than inner folds
        from joblib import Parallel, delayed
        timed = Parallel(n_jobs=min(jobs, rounds))(
            delayed(_timed_round)(dataset, spec, base_seed + r, feature_config, 1)
            for r in range(rounds))
    else:
        timed = [_timed_round(dataset, spec, base_seed + r, feature_config, jobs)
                 for r in range(rounds)]
    per_round, elapsed = [], []
    for r, (result, secs) in enumerate(timed):
        result["round"] = r
        per_round.append(result)
        elapsed.append(secs)
        logger.info("round %d done in %.1fs: %s", r, secs,
                    {m: round(v["f1"], 4) for m, v in result["models"].items()})
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "run_config": run_config or {},
        "rounds": per_round,
        "summary": summarize(per_round, models),
        "first_place": first_place_counts(per_round, models),
        "wilcoxon": pairwise_wilcoxon(per_round, models) if rounds >= 2 else [],
        TIMING_KEY: {"total_seconds": time.perf_counter() - start, "round_seconds": elapsed},
    }
    return report


def evaluate_model(model, dataset: Dataset, run_config: dict | None = None) -> dict:
    """Score one fitted model on a labeled dataset; a stacked model also reports its learners."""
    t0 = time.perf_counter()
    X, _ = build_features(dataset, model.feature_config, model.tables)
    y = dataset.labels()
    entries = {pipeline.model_mode(model): model_metrics(
        pipeline.predict_proba_features(model, X), y, model.tau)}
    if isinstance(model, stacking.StackedModel):
        for name in model.learner_names:
            single = pipeline.single_from_stack(model, name)
            entries[single.mode] = model_metrics(single.proba_features(X), y, single.tau)
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "run_config": run_config or {},
        "n_rows": len(X),
        "n_positive": int(y.sum()),
        "models": entries,
        TIMING_KEY: {"total_seconds": time.perf_counter() - t0},
    }
