"""Histogram gradient-boosted decision trees with binary logistic loss.

One engine backs every boosted model in the package: the three base learners,
the standalone boosted baselines and the stacking meta-model. Features are
quantile-binned once per fit; each round fits a regression tree to the
gradients ``p - y`` and hessians ``p (1 - p)`` with L1/L2-regularised leaf
weights ``-soft(G, l1) / (H + l2)``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from ._tree_kernels import (
    apply_bins,
    fit_bin_edges,
    grow_gbdt_tree,
    predict_forest_raw,
    update_raw,
)
from .errors import EmptyInput, InvalidConfig, SchemaMismatch
from .features import FeatureMatrix

logger = logging.getLogger(__name__)

KIND = "gbdt"
PRIOR_CLIP = 1e-6
RAW_CLIP = 30.0


@dataclass(frozen=True)
class GbdtParams:
    n_estimators: int = 100
    learning_rate: float = 0.1
    max_leaves: int = 31
    max_depth: int = 6
    feature_fraction: float = 1.0
    bagging_fraction: float = 1.0
    l1: float = 0.0
    l2: float = 0.0
    growth: str = "leaf"  # "leaf" or "depth"
    seed: int = 0
    n_bins: int = 256
    min_child_samples: int = 20
    min_child_weight: float = 1e-3
    min_split_gain: float = 0.0

    def __post_init__(self):
        if self.n_estimators < 0:
            raise InvalidConfig("n_estimators must be >= 0")
        if not 0.0 < self.learning_rate <= 1.0:
            raise InvalidConfig("learning_rate must lie in (0, 1]")
        if self.max_leaves < 2:
            raise InvalidConfig("max_leaves must be >= 2")
        if self.max_depth < 1:
            raise InvalidConfig("max_depth must be >= 1")
        for name in ("feature_fraction", "bagging_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise InvalidConfig(f"{name} must lie in (0, 1]")
        if self.l1 < 0 or self.l2 < 0:
            raise InvalidConfig("l1 and l2 must be >= 0")
        if self.growth not in ("leaf", "depth"):
            raise InvalidConfig("growth must be 'leaf' or 'depth'")
        if not 2 <= self.n_bins <= 65536:
            raise InvalidConfig("n_bins must lie in [2, 65536]")
        if self.min_child_samples < 1:
            raise InvalidConfig("min_child_samples must be >= 1")

    def replace(self, **changes) -> "GbdtParams":
        d = asdict(self)
        d.update(changes)
        return GbdtParams(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    def depth(self) -> int:
        best = 0
        stack = [(0, 0)]
        while stack:
            node, d = stack.pop()
            if self.feature[node] < 0:
                best = max(best, d)
            else:
                stack.append((int(self.left[node]), d + 1))
                stack.append((int(self.right[node]), d + 1))
        return best


@dataclass
class GbdtModel:
    trees: list[Tree]
    base_score: float
    learning_rate: float
    n_features: int
    schema_fingerprint: str | None = None
    params: dict = field(default_factory=dict)
    _packed: tuple | None = field(default=None, repr=False, compare=False)

    def _arrays(self):
        if self._packed is None:
            sizes = [t.feature.size for t in self.trees]
            offsets = np.zeros(len(sizes) + 1, dtype=np.int64)
            np.cumsum(sizes, out=offsets[1:])

            def cat(attr, dtype):
                if not self.trees:
                    return np.empty(0, dtype=dtype)
                return np.concatenate([getattr(t, attr) for t in self.trees]).astype(dtype)

            self._packed = (offsets, cat("feature", np.int32), cat("threshold", np.float64),
                            cat("left", np.int32), cat("right", np.int32), cat("value", np.float64),
                            cat("gain", np.float64))
        return self._packed

    def raw_score(self, X) -> np.ndarray:
        values = _check_input(X, self.n_features, self.schema_fingerprint)
        out = np.full(values.shape[0], self.base_score)
        offsets, feat, thr, left, right, val, _ = self._arrays()
        if self.trees:
            predict_forest_raw(values, offsets, feat, thr, left, right, val, out,
                               self.learning_rate)
        return out

    def predict_proba(self, X) -> np.ndarray:
        return _sigmoid(self.raw_score(X))


def _sigmoid(raw: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(raw, -RAW_CLIP, RAW_CLIP)))


def _check_input(X, n_features: int, fingerprint: str | None) -> np.ndarray:
    if isinstance(X, FeatureMatrix):
        if fingerprint is not None and X.fingerprint != fingerprint:
            raise SchemaMismatch("feature schema differs from the one the model was fitted on")
        values = X.values
    else:
        values = np.ascontiguousarray(X, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != n_features:
        raise SchemaMismatch(f"expected {n_features} columns, got shape {values.shape}")
    return values


def log_loss(y: np.ndarray, p: np.ndarray) -> float:
    p = np.clip(p, 1e-15, 1 - 1e-15)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))


def fit(X, y, params: GbdtParams = GbdtParams(), *, trace_loss: list | None = None) -> GbdtModel:
    """Fit a boosted ensemble under logistic loss.

    ``X`` is a ``FeatureMatrix`` (its schema fingerprint is embedded) or a
    plain 2-D array. When ``trace_loss`` is a list, the mean training log loss
    after every round is appended to it.
    """
    if isinstance(X, FeatureMatrix):
        values, fingerprint = X.values, X.fingerprint
    else:
        values, fingerprint = np.ascontiguousarray(X, dtype=np.float64), None
    y = np.asarray(y, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] == 0:
        raise EmptyInput("training matrix is empty")
    n, d = values.shape
    if y.shape != (n,):
        raise SchemaMismatch("label vector length does not match the matrix")

    rng = np.random.default_rng(params.seed)
    prior = float(np.clip(y.mean(), PRIOR_CLIP, 1 - PRIOR_CLIP))
    base = float(np.log(prior / (1 - prior)))
    edges = fit_bin_edges(values, params.n_bins)
    Xb = apply_bins(values, edges)
    nbins_all = np.array([e.size + 1 for e in edges], dtype=np.int64)

    n_feat_tree = max(1, int(round(params.feature_fraction * d)))
    n_rows_tree = max(1, int(round(params.bagging_fraction * n)))
    max_bins = int(nbins_all.max()) if d else 1
    hist = np.zeros((params.max_leaves, n_feat_tree, max_bins, 3))
    buf = np.empty(n, dtype=np.int64)
    idx = np.empty(n, dtype=np.int64)
    row_leaf = np.zeros(n, dtype=np.int32)
    in_bag = np.ones(n, dtype=np.bool_)

    raw = np.full(n, base)
    trees: list[Tree] = []
    leafwise = params.growth == "leaf"
    for _ in range(params.n_estimators):
        p = _sigmoid(raw)
        grad = p - y
        hess = p * (1.0 - p)
        if n_feat_tree < d:
            feats = np.sort(rng.choice(d, size=n_feat_tree, replace=False)).astype(np.int64)
        else:
            feats = np.arange(d, dtype=np.int64)
        if n_rows_tree < n:
            idx[:n_rows_tree] = np.sort(rng.choice(n, size=n_rows_tree, replace=False))
            in_bag[:] = False
            in_bag[idx[:n_rows_tree]] = True
        else:
            idx[:] = np.arange(n)
        feature, sbin, left, right, value, gain = grow_gbdt_tree(
            Xb, grad, hess, idx, n_rows_tree, feats, nbins_all[feats], params.max_leaves,
            params.max_depth, leafwise, params.l1, params.l2, float(params.min_child_samples),
            params.min_child_weight, params.min_split_gain, hist, buf, row_leaf,
        )
        update_raw(Xb, row_leaf, in_bag, feature, sbin, left, right, value, raw,
                   params.learning_rate)
        threshold = np.zeros(feature.size)
        for k in np.nonzero(feature >= 0)[0]:
            threshold[k] = edges[feature[k]][sbin[k]]
        trees.append(Tree(feature.copy(), threshold, left.copy(), right.copy(), value.copy(),
                          gain.copy()))
        if trace_loss is not None:
            trace_loss.append(log_loss(y, _sigmoid(raw)))
    return GbdtModel(trees, base, params.learning_rate, d, fingerprint, params.to_dict())


def predict_proba(model: GbdtModel, X) -> np.ndarray:
    """``sigmoid(base_score + lr * sum_t tree_t(x))`` per row, strictly inside (0, 1)."""
    return model.predict_proba(X)


# -- serialisation -----------------------------------------------------------------


def to_container_parts(model: GbdtModel) -> tuple[dict, dict[str, np.ndarray]]:
    offsets, feat, thr, left, right, val, gain = model._arrays()
    meta = {
        "base_score": model.base_score,
        "learning_rate": model.learning_rate,
        "n_features": model.n_features,
        "schema_fingerprint": model.schema_fingerprint,
        "params": model.params,
    }
    arrays = {"offsets": offsets, "feature": feat, "threshold": thr, "left": left,
              "right": right, "value": val, "gain": gain}
    return meta, arrays


def from_container_parts(meta: dict, arrays: dict[str, np.ndarray]) -> GbdtModel:
    offsets = arrays["offsets"]
    trees = []
    for t in range(offsets.size - 1):
        a, b = int(offsets[t]), int(offsets[t + 1])
        trees.append(Tree(arrays["feature"][a:b], arrays["threshold"][a:b], arrays["left"][a:b],
                          arrays["right"][a:b], arrays["value"][a:b], arrays["gain"][a:b]))
    return GbdtModel(trees, float(meta["base_score"]), float(meta["learning_rate"]),
                     int(meta["n_features"]), meta["schema_fingerprint"], dict(meta["params"]))


def serialize(model: GbdtModel) -> bytes:
    meta, arrays = to_container_parts(model)
    return container.pack(KIND, meta, arrays)


def deserialize(data: bytes) -> GbdtModel:
    _, meta, arrays = container.unpack(data, expect_kind=KIND)
    return from_container_parts(meta, arrays)
