"""Reference classifiers trained directly on the engineered features.

``dummy`` predicts the training prior, ``logistic`` is L2-regularised logistic
regression fitted by accelerated full-batch gradient descent, ``decision_tree``
and ``random_forest`` are Gini CARTs on quantile-binned features, and ``knn``
scores a row by the positive fraction among its k nearest standardized
neighbours (brute force, ties broken by distance then training index).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import container
from ._tree_kernels import apply_bins, fit_bin_edges, grow_cart_tree, predict_forest_raw
from .errors import EmptyInput, SchemaMismatch, SingleClass
from .features import FeatureMatrix

KIND = "baseline"
KINDS = ("dummy", "logistic", "decision_tree", "random_forest", "knn")

DEFAULT_PARAMS = {
    "dummy": {},
    "logistic": {"l2": 1.0, "max_iter": 1000, "tol": 1e-8},
    "decision_tree": {"max_depth": 8, "min_samples_leaf": 1, "n_bins": 256},
    "random_forest": {"n_trees": 100, "max_depth": 10**6, "min_samples_leaf": 1,
                      "max_features": "sqrt", "bootstrap": True, "n_bins": 256},
    "knn": {"k": 15},
}

# searched on a validation fold; the first entry wins ties
GRIDS = {
    "logistic": ("l2", (0.1, 1.0, 10.0)),
    "decision_tree": ("max_depth", (4, 8, 16)),
    "random_forest": ("n_trees", (50, 100, 200)),
    "knn": ("k", (5, 15, 31)),
}

KNN_CHUNK = 1024


@dataclass
class BaselineModel:
    kind: str
    params: dict
    n_features: int
    schema_fingerprint: str | None
    state: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict)

    def predict_proba(self, X) -> np.ndarray:
        return predict_baseline(self, X)


def _values(X) -> tuple[np.ndarray, str | None]:
    if isinstance(X, FeatureMatrix):
        return X.values, X.fingerprint
    return np.ascontiguousarray(X, dtype=np.float64), None


def _standardize_fit(values: np.ndarray):
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


# -- logistic regression ------------------------------------------------------------


def _fit_logistic(Z: np.ndarray, y: np.ndarray, l2: float, max_iter: int, tol: float):
    """Nesterov-accelerated gradient descent on mean log loss + l2/(2n) |w|^2 (bias unpenalised)."""
    n, d = Z.shape
    A = np.hstack([Z, np.ones((n, 1))])
    lipschitz = 0.25 * np.linalg.norm(A, 2) ** 2 / n + l2 / n
    step = 1.0 / lipschitz
    reg = np.full(d + 1, l2 / n)
    reg[-1] = 0.0

    def objective(w):
        z = A @ w
        return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * np.sum(reg * w * w))

    def gradient(w):
        p = 1.0 / (1.0 + np.exp(-np.clip(A @ w, -500, 500)))
        return A.T @ (p - y) / n + reg * w

    w = np.zeros(d + 1)
    v = w.copy()
    t = 1.0
    prev = objective(w)
    for _ in range(max_iter):
        w_next = v - step * gradient(v)
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        v = w_next + ((t - 1.0) / t_next) * (w_next - w)
        w, t = w_next, t_next
        cur = objective(w)
        if cur > prev:
            # restart momentum on an uphill step
            v = w.copy()
            t = 1.0
        if abs(prev - cur) < tol:
            break
        prev = cur
    return w[:-1], float(w[-1])


# -- trees ------------------------------------------------------------------------


def _cart_arrays(trees, edges):
    feats, thrs, lefts, rights, vals = [], [], [], [], []
    sizes = []
    for feature, sbin, left, right, value, _ in trees:
        thr = np.zeros(feature.size)
        inner = np.nonzero(feature >= 0)[0]
        for k in inner:
            thr[k] = edges[feature[k]][sbin[k]]
        feats.append(feature)
        thrs.append(thr)
        lefts.append(left)
        rights.append(right)
        vals.append(value)
        sizes.append(feature.size)
    offsets = np.zeros(len(sizes) + 1, dtype=np.int64)
    np.cumsum(sizes, out=offsets[1:])
    return {
        "offsets": offsets,
        "feature": np.concatenate(feats).astype(np.int32),
        "threshold": np.concatenate(thrs),
        "left": np.concatenate(lefts).astype(np.int32),
        "right": np.concatenate(rights).astype(np.int32),
        "value": np.concatenate(vals),
    }


def _member_seed(seed: int, member: int) -> int:
    return int(np.random.SeedSequence([seed, member]).generate_state(1)[0] & 0x7FFFFFFF)


def _fit_forest(values, y, n_trees, max_depth, min_samples_leaf, max_features, bootstrap,
                n_bins, seed):
    n, d = values.shape
    edges = fit_bin_edges(values, n_bins)
    Xb = apply_bins(values, edges)
    nbins = np.array([e.size + 1 for e in edges], dtype=np.int64)
    yf = y.astype(np.float64)
    trees = []
    for t in range(n_trees):
        s = _member_seed(seed, t)
        if bootstrap:
            idx = np.sort(np.random.default_rng(s).integers(0, n, size=n)).astype(np.int64)
        else:
            idx = np.arange(n, dtype=np.int64)
        trees.append(grow_cart_tree(Xb, yf, idx, nbins, int(max_depth), float(min_samples_leaf),
                                    int(max_features), s))
    return _cart_arrays(trees, edges)


def _resolve_max_features(spec, d: int) -> int:
    if spec in (None, "all"):
        return d
    if spec == "sqrt":
        return max(1, int(math.sqrt(d)))
    if isinstance(spec, float) and spec <= 1.0:
        return max(1, int(round(spec * d)))
    return max(1, min(d, int(spec)))


# -- public API ---------------------------------------------------------------------


def fit_baseline(kind: str, X, y, params: dict | None = None, seed: int = 0) -> BaselineModel:
    if kind not in KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}; expected one of {KINDS}")
    values, fingerprint = _values(X)
    y = np.asarray(y)
    if values.shape[0] == 0:
        raise EmptyInput("training matrix is empty")
    if y.shape != (values.shape[0],):
        raise SchemaMismatch("label vector length does not match the matrix")
    p = dict(DEFAULT_PARAMS[kind])
    p.update(params or {})
    n, d = values.shape
    n_pos = int(y.sum())
    if kind != "dummy" and n_pos in (0, n):
        raise SingleClass(f"{kind} needs both classes in the training labels")
    model = BaselineModel(kind, p, d, fingerprint)
    yf = y.astype(np.float64)

    if kind == "dummy":
        model.state["prior"] = n_pos / n
    elif kind == "logistic":
        mean, std = _standardize_fit(values)
        w, b = _fit_logistic((values - mean) / std, yf, float(p["l2"]), int(p["max_iter"]),
                             float(p["tol"]))
        model.state["bias"] = b
        model.arrays.update(mean=mean, std=std, coef=w)
    elif kind == "decision_tree":
        model.arrays.update(_fit_forest(values, y, 1, p["max_depth"], p["min_samples_leaf"],
                                        d, False, p["n_bins"], seed))
    elif kind == "random_forest":
        model.arrays.update(_fit_forest(
            values, y, int(p["n_trees"]), p["max_depth"], p["min_samples_leaf"],
            _resolve_max_features(p["max_features"], d), bool(p["bootstrap"]), p["n_bins"], seed))
    elif kind == "knn":
        mean, std = _standardize_fit(values)
        model.arrays.update(mean=mean, std=std, train=(values - mean) / std,
                            labels=y.astype(np.int8))
    model.params["seed"] = seed
    return model


def _check(model: BaselineModel, X) -> np.ndarray:
    values, fingerprint = _values(X)
    if (fingerprint is not None and model.schema_fingerprint is not None
            and fingerprint != model.schema_fingerprint):
        raise SchemaMismatch("feature schema differs from the one the model was fitted on")
    if values.ndim != 2 or values.shape[1] != model.n_features:
        raise SchemaMismatch(f"expected {model.n_features} columns, got shape {values.shape}")
    return values


def knn_neighbours(train: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Indices ``(m, k)`` of the k nearest training rows, ordered by (distance, index)."""
    n = train.shape[0]
    k = min(k, n)
    sq_train = np.einsum("ij,ij->i", train, train)
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    for a in range(0, queries.shape[0], KNN_CHUNK):
        q = queries[a:a + KNN_CHUNK]
        dist = sq_train[None, :] - 2.0 * (q @ train.T) + np.einsum("ij,ij->i", q, q)[:, None]
        np.maximum(dist, 0.0, out=dist)
        if k < n:
            part = np.argpartition(dist, k - 1, axis=1)[:, :k]
        else:
            part = np.broadcast_to(np.arange(n), (q.shape[0], n)).copy()
        rows = np.arange(q.shape[0])[:, None]
        kth = dist[rows, part].max(axis=1)
        n_within = (dist <= kth[:, None]).sum(axis=1)
        for r in np.nonzero(n_within > k)[0]:
            # ties at the k-th distance: take the lowest training indices
            cand = np.nonzero(dist[r] <= kth[r])[0]
            part[r] = cand[np.lexsort((cand, dist[r, cand]))][:k]
        d_sel = dist[rows, part]
        order = np.lexsort((part, d_sel), axis=1)
        out[a:a + q.shape[0]] = np.take_along_axis(part, order, axis=1)
    return out


def predict_baseline(model: BaselineModel, X) -> np.ndarray:
    values = _check(model, X)
    kind = model.kind
    if kind == "dummy":
        return np.full(values.shape[0], float(model.state["prior"]))
    if kind == "logistic":
        a = model.arrays
        z = ((values - a["mean"]) / a["std"]) @ a["coef"] + model.state["bias"]
        return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))
    if kind in ("decision_tree", "random_forest"):
        a = model.arrays
        n_trees = a["offsets"].size - 1
        out = np.zeros(values.shape[0])
        predict_forest_raw(values, a["offsets"], a["feature"], a["threshold"], a["left"],
                           a["right"], a["value"], out, 1.0 / n_trees)
        return np.clip(out, 0.0, 1.0)
    if kind == "knn":
        return knn_from_neighbours(model, knn_neighbours(
            model.arrays["train"], (values - model.arrays["mean"]) / model.arrays["std"],
            int(model.params["k"])))
    raise ValueError(f"unknown baseline kind {kind!r}")


def knn_from_neighbours(model: BaselineModel, neighbours: np.ndarray, k: int | None = None):
    k = neighbours.shape[1] if k is None else k
    return model.arrays["labels"][neighbours[:, :k]].mean(axis=1).astype(np.float64)


def truncate_forest(model: BaselineModel, n_trees: int) -> BaselineModel:
    """The forest made of the first ``n_trees`` members (identical to fitting that many)."""
    a = model.arrays
    end = int(a["offsets"][n_trees])
    arrays = {name: a[name][:end] for name in ("feature", "threshold", "left", "right", "value")}
    arrays["offsets"] = a["offsets"][: n_trees + 1].copy()
    params = dict(model.params, n_trees=n_trees)
    return BaselineModel(model.kind, params, model.n_features, model.schema_fingerprint,
                         dict(model.state), arrays)


def serialize(model: BaselineModel) -> bytes:
    meta = {"baseline_kind": model.kind, "params": model.params, "n_features": model.n_features,
            "schema_fingerprint": model.schema_fingerprint, "state": model.state}
    return container.pack(KIND, meta, model.arrays)


def deserialize(data: bytes) -> BaselineModel:
    _, meta, arrays = container.unpack(data, expect_kind=KIND)
    return BaselineModel(meta["baseline_kind"], meta["params"], meta["n_features"],
                         meta["schema_fingerprint"], meta["state"], arrays)
