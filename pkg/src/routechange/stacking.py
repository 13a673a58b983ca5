"""Out-of-fold stacking of three boosted base learners under a boosted meta-model.

Training runs in three phases:

1. engineer features on the training rows (aggregate tables are fitted here),
2. produce out-of-fold probabilities for each base learner with stratified
   K-fold, keeping every fold-model for test-time averaging,
3. build meta-features from those probabilities plus a few original columns,
   fit the meta-model on all rows and calibrate the decision threshold.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import container, gbdt, hyperopt
from .errors import InvalidConfig, SchemaMismatch, TooFewPerClass
from .evaluate import apply_threshold, f1_curve, threshold_grid, threshold_scan
from .features import AggregateTables, FeatureConfig, FeatureMatrix, build_features
from .gbdt import GbdtModel, GbdtParams
from .ingest import Dataset

logger = logging.getLogger(__name__)

KIND = "stacked"
DEFAULT_FOLDS = 5

BASE_LEARNERS: dict[str, GbdtParams] = {
    "leaf31": GbdtParams(n_estimators=300, learning_rate=0.05, max_leaves=31, max_depth=64,
                         growth="leaf", feature_fraction=0.9, l2=0.0, seed=11),
    "depth6": GbdtParams(n_estimators=300, learning_rate=0.05, max_leaves=64, max_depth=6,
                         growth="depth", feature_fraction=0.8, l2=1.0, seed=23),
    "leaf63": GbdtParams(n_estimators=300, learning_rate=0.05, max_leaves=63, max_depth=64,
                         growth="leaf", feature_fraction=0.7, bagging_fraction=0.8, l2=3.0,
                         seed=37),
}

META_PARAMS = GbdtParams(n_estimators=200, learning_rate=0.0409, max_leaves=10, max_depth=3,
                         feature_fraction=0.6687, bagging_fraction=0.7547, l1=0.5019,
                         l2=0.1471, growth="leaf", seed=5)

PSI_COLUMNS = ("rtt_mean", "rtt_std", "rtt_p90", "success_rate", "delta_rtt_mean",
               "roll3_mean_rtt_mean")
SUCCESS_COLUMN = "success_rate"

THRESHOLD_MODES = ("oof", "paper")


# -- folds -----------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldAssignment:
    folds: np.ndarray
    k: int
    seed: int

    def train_rows(self, fold: int) -> np.ndarray:
        return np.nonzero(self.folds != fold)[0]

    def test_rows(self, fold: int) -> np.ndarray:
        return np.nonzero(self.folds == fold)[0]


def deal_folds(y, k: int, seed: int = 0) -> np.ndarray:
    """Shuffle each class with ``seed`` and deal its rows round-robin over ``k`` folds.

    The dealing counter carries over from class 0 to class 1, so fold sizes
    differ by at most one overall as well as per class. No size checks.
    """
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    folds = np.empty(y.size, dtype=np.int64)
    counter = 0
    for cls in (0, 1):
        idx = np.nonzero(y == cls)[0]
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = (counter + np.arange(idx.size)) % k
        counter += idx.size
    return folds


def stratified_kfold(y, k: int = DEFAULT_FOLDS, seed: int = 0) -> FoldAssignment:
    """Stratified assignment by ``deal_folds``; every class needs at least ``k`` rows."""
    y = np.asarray(y)
    if k < 2:
        raise InvalidConfig("fold count must be >= 2")
    if np.any((y != 0) & (y != 1)):
        raise InvalidConfig("labels must be 0 or 1")
    for cls in (0, 1):
        count = int(np.sum(y == cls))
        if count < k:
            raise TooFewPerClass(f"class {cls} has {count} rows, fewer than {k} folds")
    return FoldAssignment(deal_folds(y, k, seed), k, seed)


# -- out-of-fold predictions -----------------------------------------------------------


@dataclass
class OofMatrix:
    names: tuple[str, ...]
    probs: np.ndarray  # (n, n_learners)
    models: list[list[GbdtModel]]  # [learner][fold]
    folds: FoldAssignment

    def fold_average(self, X, learner: int | None = None) -> np.ndarray:
        return fold_average(self.models if learner is None else [self.models[learner]], X)


def fold_average(models: Sequence[Sequence[GbdtModel]], X) -> np.ndarray:
    """Per learner, the arithmetic mean of its fold-model probabilities; shape (n, L)."""
    cols = [np.mean([m.predict_proba(X) for m in fold_models], axis=0)
            for fold_models in models]
    return np.column_stack(cols)


def _fold_seed(seed: int, stream: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, stream, fold]).generate_state(1)[0])


def _fit_fold(X: FeatureMatrix, y: np.ndarray, params: GbdtParams, train: np.ndarray,
              test: np.ndarray) -> tuple[GbdtModel, np.ndarray]:
    model = gbdt.fit(X.take(train), y[train], params)
    return model, model.predict_proba(X.take(test))


def _run_tasks(tasks, jobs: int):
    if jobs > 1 and len(tasks) > 1:
        from joblib import Parallel, delayed
        return Parallel(n_jobs=jobs)(delayed(fn)(*args) for fn, args in tasks)
    return [fn(*args) for fn, args in tasks]


def generate_oof(base_configs: dict[str, GbdtParams] | Sequence[GbdtParams], X: FeatureMatrix,
                 y, folds: FoldAssignment, seed: int = 0, jobs: int = 1) -> OofMatrix:
    """Fit every (learner, fold) pair on the fold's complement and score the held-out rows."""
    if isinstance(base_configs, dict):
        names, configs = tuple(base_configs), list(base_configs.values())
    else:
        configs = list(base_configs)
        names = tuple(f"learner{i}" for i in range(len(configs)))
    y = np.asarray(y)
    if y.shape != (len(X),) or folds.folds.shape != y.shape:
        raise SchemaMismatch("labels, folds and matrix disagree on row count")
    tasks = []
    for li, params in enumerate(configs):
        for f in range(folds.k):
            # keyed on the learner's own seed, so fitting a learner alone gives the same models
            p = params.replace(seed=_fold_seed(seed, params.seed, f))
            tasks.append((_fit_fold, (X, y, p, folds.train_rows(f), folds.test_rows(f))))
    results = _run_tasks(tasks, jobs)
    probs = np.empty((len(X), len(configs)))
    models: list[list[GbdtModel]] = [[] for _ in configs]
    for t, (model, pred) in enumerate(results):
        li, f = divmod(t, folds.k)
        probs[folds.test_rows(f), li] = pred
        models[li].append(model)
    return OofMatrix(names, probs, models, folds)


# -- meta-features ---------------------------------------------------------------------


@dataclass(frozen=True)
class MetaFeatures:
    names: tuple[str, ...]
    values: np.ndarray


def meta_feature_names(n_learners: int = 3, selected: Sequence[str] = PSI_COLUMNS) -> list[str]:
    m = range(1, n_learners + 1)
    pairs = [(a, b) for a in m for b in m if a < b]
    return ([f"p{i}" for i in m] + ["p_mean", "p_std", "p_median"]
            + [f"absdiff_p{a}_p{b}" for a, b in pairs] + list(selected)
            + [f"p{i}_x_{SUCCESS_COLUMN}" for i in m] + [f"p{i}_sq" for i in m])


def build_meta_features(oof, X: FeatureMatrix,
                        selected: Sequence[str] = PSI_COLUMNS) -> MetaFeatures:
    """Columns ``[p, mean, std, median, |pa - pb|, selected X columns, p * sr, p**2]``.

    ``oof`` is an ``OofMatrix`` or an (n, learners) probability array.
    """
    p = oof.probs if isinstance(oof, OofMatrix) else np.asarray(oof, dtype=np.float64)
    psi = X.select(selected)
    sr = X.column(SUCCESS_COLUMN)
    m = p.shape[1]
    diffs = [np.abs(p[:, a] - p[:, b]) for a in range(m) for b in range(a + 1, m)]
    values = np.column_stack([
        p, p.mean(axis=1), p.std(axis=1), np.median(p, axis=1), *diffs, psi,
        p * sr[:, None], p * p,
    ])
    return MetaFeatures(tuple(meta_feature_names(m, selected)), values)


# -- stacked model ---------------------------------------------------------------------


@dataclass
class StackedModel:
    feature_config: FeatureConfig
    tables: AggregateTables
    learner_names: tuple[str, ...]
    base_models: list[list[GbdtModel]]
    meta_model: GbdtModel
    tau: float
    selected: tuple[str, ...] = PSI_COLUMNS
    info: dict = field(default_factory=dict)
    # training-time diagnostics, never serialized
    diagnostics: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise InvalidConfig("threshold must lie in [0, 1]")


def meta_cv_probs(H: np.ndarray, y: np.ndarray, params: GbdtParams, k: int, seed: int,
                  jobs: int = 1) -> np.ndarray:
    """Out-of-fold meta-model probabilities over a fresh stratified split of the meta rows."""
    folds = stratified_kfold(y, k, seed + 1)
    tasks = [(_fit_fold, (FeatureMatrix(tuple(f"h{i}" for i in range(H.shape[1])), H), y,
                          params.replace(seed=_fold_seed(seed, 1000 + params.seed, f)),
                          folds.train_rows(f), folds.test_rows(f))) for f in range(k)]
    out = np.empty(y.size)
    for f, (_, pred) in enumerate(_run_tasks(tasks, jobs)):
        out[folds.test_rows(f)] = pred
    return out


def _meta_objective(H: np.ndarray, y: np.ndarray, base: GbdtParams, k: int, seed: int,
                    jobs: int):
    folds = stratified_kfold(y, k, seed + 2)
    grid = threshold_grid()
    schema = tuple(f"h{i}" for i in range(H.shape[1]))
    Hm = FeatureMatrix(schema, H)

    def objective(vector: dict) -> float:
        params = base.replace(**hyperopt.to_gbdt_changes(vector))
        tasks = [(_fit_fold, (Hm, y, params, folds.train_rows(f), folds.test_rows(f)))
                 for f in range(k)]
        scores = []
        for f, (_, pred) in enumerate(_run_tasks(tasks, jobs)):
            # each CV fold calibrates its own threshold on the rows it scores
            scores.append(float(f1_curve(pred, y[folds.test_rows(f)], grid).max()))
        return float(np.mean(scores))

    return objective


def fit_stacked_features(X: FeatureMatrix, y, feature_config: FeatureConfig,
                         tables: AggregateTables,
                         base_configs: dict[str, GbdtParams] = BASE_LEARNERS,
                         meta_params: GbdtParams = META_PARAMS, k: int = DEFAULT_FOLDS,
                         seed: int = 0, threshold_mode: str = "oof", hyperopt_trials: int = 0,
                         jobs: int = 1, selected: Sequence[str] = PSI_COLUMNS) -> StackedModel:
    """Phases 2 and 3 on an already engineered training matrix."""
    if threshold_mode not in THRESHOLD_MODES:
        raise InvalidConfig(f"threshold mode must be one of {THRESHOLD_MODES}")
    y = np.asarray(y)
    folds = stratified_kfold(y, k, seed)
    oof = generate_oof(base_configs, X, y, folds, seed=seed, jobs=jobs)
    meta = build_meta_features(oof, X, selected)
    H = meta.values

    info: dict = {"k": k, "seed": seed, "threshold_mode": threshold_mode,
                  "base_params": {n: p.to_dict() for n, p in zip(oof.names, base_configs.values())}}
    if hyperopt_trials > 0:
        objective = _meta_objective(H, y, meta_params, k, seed, jobs)
        best, best_value, history = hyperopt.optimize(objective, hyperopt.meta_search_space(),
                                                      hyperopt_trials, seed=seed)
        if best is not None:
            meta_params = meta_params.replace(**hyperopt.to_gbdt_changes(best))
        info["hyperopt"] = {"trials": hyperopt_trials, "best_value": best_value,
                            "best": best}
        logger.info("meta search best CV F1 %.4f", best_value)
    else:
        history = None
    meta_params = meta_params.replace(seed=_fold_seed(seed, 2000 + meta_params.seed, 0))
    meta_model = gbdt.fit(FeatureMatrix(meta.names, H), y, meta_params)
    if threshold_mode == "paper":
        calib = meta_model.predict_proba(FeatureMatrix(meta.names, H))
    else:
        calib = meta_cv_probs(H, y, meta_params, k, seed, jobs)
    tau, f1 = threshold_scan(calib, y)
    info["meta_params"] = meta_params.to_dict()
    info["learner_taus"] = {n: threshold_scan(oof.probs[:, i], y)[0]
                            for i, n in enumerate(oof.names)}
    info["calibration_f1"] = f1
    model = StackedModel(feature_config, tables, oof.names, oof.models, meta_model, tau,
                         tuple(selected), info)
    model.diagnostics.update(oof=oof, meta_calibration=calib, history=history)
    return model


def train_stacked(dataset: Dataset, feature_config: FeatureConfig = FeatureConfig(),
                  base_configs: dict[str, GbdtParams] = BASE_LEARNERS,
                  meta_params: GbdtParams = META_PARAMS, k: int = DEFAULT_FOLDS, seed: int = 0,
                  **kw) -> StackedModel:
    """Features, out-of-fold base scores, meta-model and threshold from a labeled dataset."""
    X, tables = build_features(dataset, feature_config)
    return fit_stacked_features(X, dataset.labels(), feature_config, tables, base_configs,
                                meta_params, k, seed, **kw)


def stacked_proba_features(model: StackedModel, X: FeatureMatrix) -> np.ndarray:
    base = fold_average(model.base_models, X)
    H = build_meta_features(base, X, model.selected)
    return model.meta_model.predict_proba(FeatureMatrix(H.names, H.values))


def predict_stacked(model: StackedModel, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and ``p >= tau`` decisions using the frozen feature tables."""
    X, _ = build_features(dataset, model.feature_config, model.tables)
    probs = stacked_proba_features(model, X)
    return probs, apply_threshold(probs, model.tau)


# -- persistence ----------------------------------------------------------------------


def _pack_models(prefix: str, models: Sequence[GbdtModel], arrays: dict) -> list[dict]:
    metas = []
    for i, m in enumerate(models):
        meta, arr = gbdt.to_container_parts(m)
        metas.append(meta)
        for name, a in arr.items():
            arrays[f"{prefix}/{i}/{name}"] = a
    return metas


def _unpack_models(prefix: str, metas: list[dict], arrays: dict) -> list[GbdtModel]:
    out = []
    for i, meta in enumerate(metas):
        key = f"{prefix}/{i}/"
        out.append(gbdt.from_container_parts(
            meta, {k[len(key):]: v for k, v in arrays.items() if k.startswith(key)}))
    return out


def serialize(model: StackedModel) -> bytes:
    arrays: dict[str, np.ndarray] = {}
    base_meta = [_pack_models(f"base/{li}", fm, arrays) for li, fm in enumerate(model.base_models)]
    meta_meta = _pack_models("meta", [model.meta_model], arrays)[0]
    meta = {
        "feature_config": model.feature_config.to_dict(),
        "tables": model.tables.to_dict(),
        "learner_names": list(model.learner_names),
        "base_models": base_meta,
        "meta_model": meta_meta,
        "tau": model.tau,
        "selected": list(model.selected),
        "info": _jsonable(model.info),
    }
    return container.pack(KIND, meta, arrays)


def deserialize(data: bytes) -> StackedModel:
    _, meta, arrays = container.unpack(data, expect_kind=KIND)
    base = [_unpack_models(f"base/{li}", ms, arrays) for li, ms in enumerate(meta["base_models"])]
    meta_model = _unpack_models("meta", [meta["meta_model"]], arrays)[0]
    return StackedModel(FeatureConfig.from_dict(meta["feature_config"]),
                        AggregateTables.from_dict(meta["tables"]),
                        tuple(meta["learner_names"]), base, meta_model, float(meta["tau"]),
                        tuple(meta["selected"]), meta["info"])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
