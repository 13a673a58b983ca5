"""Train, persist and apply every model mode the CLI exposes.

Modes are ``stacked``, ``single:<learner>`` (one base learner as a fold
ensemble) and ``baseline:<kind>``. Each fitted pipeline carries its feature
config, the aggregate tables fitted on its training rows and its threshold.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import baselines, container, gbdt, stacking
from .errors import InvalidConfig
from .evaluate import apply_threshold, threshold_scan
from .features import AggregateTables, FeatureConfig, FeatureMatrix, build_features
from .ingest import Dataset

KIND = "pipeline"
DUMMY_THRESHOLD = 0.5
VALIDATION_FOLD = 0


def parse_mode(mode: str) -> tuple[str, str | None]:
    if mode == "stacked":
        return "stacked", None
    family, _, name = mode.partition(":")
    if family == "single" and name in stacking.BASE_LEARNERS:
        return family, name
    if family == "baseline" and name in baselines.KINDS:
        return family, name
    raise InvalidConfig(
        f"unknown mode {mode!r}; expected stacked, single:<{'|'.join(stacking.BASE_LEARNERS)}>"
        f" or baseline:<{'|'.join(baselines.KINDS)}>")


def all_modes() -> list[str]:
    return (["stacked"] + [f"single:{n}" for n in stacking.BASE_LEARNERS]
            + [f"baseline:{k}" for k in baselines.KINDS])


@dataclass
class FittedPipeline:
    mode: str
    feature_config: FeatureConfig
    tables: AggregateTables
    tau: float
    fold_models: list[gbdt.GbdtModel] = field(default_factory=list)
    baseline: baselines.BaselineModel | None = None
    info: dict = field(default_factory=dict)

    def proba_features(self, X: FeatureMatrix) -> np.ndarray:
        if self.baseline is not None:
            return baselines.predict_baseline(self.baseline, X)
        return stacking.fold_average([self.fold_models], X)[:, 0]


# -- fitting on an engineered matrix ------------------------------------------------


def fit_single_features(X: FeatureMatrix, y, name: str, feature_config: FeatureConfig,
                        tables: AggregateTables, k: int = stacking.DEFAULT_FOLDS, seed: int = 0,
                        threshold_mode: str = "oof", jobs: int = 1) -> FittedPipeline:
    y = np.asarray(y)
    folds = stacking.stratified_kfold(y, k, seed)
    oof = stacking.generate_oof({name: stacking.BASE_LEARNERS[name]}, X, y, folds, seed, jobs)
    pipe = FittedPipeline(f"single:{name}", feature_config, tables, 0.0, oof.models[0],
                          info={"k": k, "seed": seed, "threshold_mode": threshold_mode})
    calib = oof.probs[:, 0] if threshold_mode == "oof" else pipe.proba_features(X)
    pipe.tau = threshold_scan(calib, y)[0]
    return pipe


def single_from_stack(model: stacking.StackedModel, name: str) -> FittedPipeline:
    """The stack's fold-models for one learner with the threshold calibrated on its OOF scores.

    Identical to ``fit_single_features`` with the same seed, folds and data.
    """
    li = model.learner_names.index(name)
    return FittedPipeline(f"single:{name}", model.feature_config, model.tables,
                          float(model.info["learner_taus"][name]), model.base_models[li],
                          info={"k": model.info["k"], "seed": model.info["seed"],
                                "threshold_mode": "oof"})


def select_baseline(kind: str, X: FeatureMatrix, y, folds: stacking.FoldAssignment,
                    seed: int = 0) -> tuple[dict, float, float]:
    """Grid value and threshold chosen by F1 on the validation fold: (params, tau, fold F1)."""
    train = folds.train_rows(VALIDATION_FOLD)
    valid = folds.test_rows(VALIDATION_FOLD)
    Xtr, Xva, ytr, yva = X.take(train), X.take(valid), y[train], y[valid]
    if kind == "dummy":
        return {}, DUMMY_THRESHOLD, 0.0
    name, grid = baselines.GRIDS[kind]
    scored = []
    if kind == "random_forest":
        big = baselines.fit_baseline(kind, Xtr, ytr, {name: max(grid)}, seed)
        preds = [baselines.predict_baseline(baselines.truncate_forest(big, v), Xva) for v in grid]
    elif kind == "knn":
        base = baselines.fit_baseline(kind, Xtr, ytr, {name: max(grid)}, seed)
        a = base.arrays
        nb = baselines.knn_neighbours(a["train"], (Xva.values - a["mean"]) / a["std"], max(grid))
        preds = [baselines.knn_from_neighbours(base, nb, v) for v in grid]
    else:
        preds = [baselines.predict_baseline(baselines.fit_baseline(kind, Xtr, ytr, {name: v}, seed),
                                            Xva) for v in grid]
    for value, p in zip(grid, preds):
        tau, f1 = threshold_scan(p, yva)
        scored.append((f1, value, tau))
    best = max(scored, key=lambda s: s[0])  # max keeps the first of equal scores
    return {name: best[1]}, best[2], best[0]


def fit_baseline_features(X: FeatureMatrix, y, kind: str, feature_config: FeatureConfig,
                          tables: AggregateTables, k: int = stacking.DEFAULT_FOLDS,
                          seed: int = 0, threshold_mode: str = "oof") -> FittedPipeline:
    y = np.asarray(y)
    folds = stacking.stratified_kfold(y, k, seed)
    params, tau, valid_f1 = select_baseline(kind, X, y, folds, seed)
    model = baselines.fit_baseline(kind, X, y, params, seed)
    if threshold_mode == "paper" and kind != "dummy":
        tau = threshold_scan(baselines.predict_baseline(model, X), y)[0]
    return FittedPipeline(f"baseline:{kind}", feature_config, tables, tau, baseline=model,
                          info={"k": k, "seed": seed, "threshold_mode": threshold_mode,
                                "selected": params, "validation_f1": valid_f1})


# -- dataset-level entry points ----------------------------------------------------


def train(dataset: Dataset, mode: str = "stacked", feature_config: FeatureConfig = FeatureConfig(),
          k: int = stacking.DEFAULT_FOLDS, seed: int = 0, threshold_mode: str = "oof",
          hyperopt_trials: int = 0, jobs: int = 1):
    family, name = parse_mode(mode)
    X, tables = build_features(dataset, feature_config)
    y = dataset.labels()
    if family == "stacked":
        return stacking.fit_stacked_features(X, y, feature_config, tables, k=k, seed=seed,
                                             threshold_mode=threshold_mode,
                                             hyperopt_trials=hyperopt_trials, jobs=jobs)
    if family == "single":
        return fit_single_features(X, y, name, feature_config, tables, k, seed, threshold_mode,
                                   jobs)
    return fit_baseline_features(X, y, name, feature_config, tables, k, seed, threshold_mode)


def model_mode(model) -> str:
    return "stacked" if isinstance(model, stacking.StackedModel) else model.mode


def predict_proba_features(model, X: FeatureMatrix) -> np.ndarray:
    if isinstance(model, stacking.StackedModel):
        return stacking.stacked_proba_features(model, X)
    return model.proba_features(X)


def predict(model, dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    X, _ = build_features(dataset, model.feature_config, model.tables)
    probs = predict_proba_features(model, X)
    return probs, apply_threshold(probs, model.tau)


# -- persistence ----------------------------------------------------------------------


def serialize(model) -> bytes:
    if isinstance(model, stacking.StackedModel):
        return stacking.serialize(model)
    arrays: dict[str, np.ndarray] = {}
    meta = {"mode": model.mode, "feature_config": model.feature_config.to_dict(),
            "tables": model.tables.to_dict(), "tau": model.tau,
            "info": stacking._jsonable(model.info)}
    if model.baseline is not None:
        b = model.baseline
        meta["baseline"] = {"baseline_kind": b.kind, "params": b.params,
                            "n_features": b.n_features,
                            "schema_fingerprint": b.schema_fingerprint, "state": b.state}
        arrays.update({f"baseline/{k}": v for k, v in b.arrays.items()})
    else:
        meta["fold_models"] = stacking._pack_models("fold", model.fold_models, arrays)
    return container.pack(KIND, meta, arrays)


def deserialize(data: bytes):
    kind = container.peek_kind(data)
    if kind == stacking.KIND:
        return stacking.deserialize(data)
    _, meta, arrays = container.unpack(data, expect_kind=KIND)
    pipe = FittedPipeline(meta["mode"], FeatureConfig.from_dict(meta["feature_config"]),
                          AggregateTables.from_dict(meta["tables"]), float(meta["tau"]),
                          info=meta["info"])
    if "baseline" in meta:
        b = meta["baseline"]
        pipe.baseline = baselines.BaselineModel(
            b["baseline_kind"], b["params"], b["n_features"], b["schema_fingerprint"], b["state"],
            {k[len("baseline/"):]: v for k, v in arrays.items() if k.startswith("baseline/")})
    else:
        pipe.fold_models = stacking._unpack_models("fold", meta["fold_models"], arrays)
    return pipe


def load(path) -> object:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
