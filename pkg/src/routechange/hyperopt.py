"""Tree-structured Parzen Estimator search over box-shaped spaces.

Objectives are maximised. After ``n_startup`` prior draws, completed trials are
split at the ``gamma`` quantile of their values into a good and a bad set. Each
parameter gets two truncated-Gaussian Parzen mixtures (one per set, plus a
broad prior component); ``n_candidates`` points are drawn from the good
mixture and the one with the largest ``log l(x) - log g(x)`` is proposed.

Every trial's randomness comes from ``default_rng([seed, trial_number])``, so a
history reloaded from JSON lines resumes exactly where it stopped.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import EmptySpace, InvalidConfig, ObjectiveFailure

logger = logging.getLogger(__name__)

GAMMA = 0.25
N_STARTUP = 20
N_CANDIDATES = 24


@dataclass(frozen=True)
class Param:
    name: str
    kind: str  # "uniform" or "quniform"
    lo: float
    hi: float
    step: float | None = None

    def __post_init__(self):
        if not self.lo < self.hi:
            raise InvalidConfig(f"{self.name}: lo must be < hi")
        if self.kind == "quniform":
            if not self.step or self.step <= 0:
                raise InvalidConfig(f"{self.name}: quantized parameter needs a positive step")
            ratio = (self.hi - self.lo) / self.step
            if abs(ratio - round(ratio)) > 1e-9:
                raise InvalidConfig(f"{self.name}: step must divide hi - lo")
        elif self.kind != "uniform":
            raise InvalidConfig(f"{self.name}: unknown kind {self.kind!r}")

    def snap(self, x: float) -> float:
        if self.kind == "quniform":
            k = round((x - self.lo) / self.step)
            x = self.lo + k * self.step
            if float(self.step).is_integer() and float(self.lo).is_integer():
                x = float(int(round(x)))
        return float(min(max(x, self.lo), self.hi))

    def contains(self, x: float) -> bool:
        if not self.lo - 1e-12 <= x <= self.hi + 1e-12:
            return False
        if self.kind == "quniform":
            k = (x - self.lo) / self.step
            return abs(k - round(k)) <= 1e-9
        return True


@dataclass(frozen=True)
class SearchSpace:
    params: tuple[Param, ...]

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))
        if not self.params:
            raise EmptySpace("search space has no parameters")

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.params]

    def contains(self, vector: dict) -> bool:
        return set(vector) == set(self.names) and all(
            p.contains(float(vector[p.name])) for p in self.params)


@dataclass
class Trial:
    number: int
    params: dict
    value: float | None
    status: str  # "ok" or "fail"

    def to_dict(self) -> dict:
        value = self.value
        if value is not None and not math.isfinite(value):
            value = None
        return {"number": self.number, "params": self.params, "value": value,
                "status": self.status}


@dataclass
class TrialHistory:
    seed: int
    trials: list[Trial] = field(default_factory=list)

    def completed(self) -> list[Trial]:
        return [t for t in self.trials if t.status == "ok"]

    def best(self) -> Trial | None:
        done = self.completed()
        if not done:
            return None
        return max(done, key=lambda t: (t.value, -t.number))

    def to_jsonl(self) -> str:
        lines = [json.dumps({"seed": self.seed, **t.to_dict()}, sort_keys=True)
                 for t in self.trials]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_jsonl(cls, text: str, seed: int | None = None) -> "TrialHistory":
        trials = []
        file_seed = seed
        for line in text.splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            file_seed = d.get("seed", file_seed)
            value = d["value"]
            if d["status"] != "ok":
                value = -math.inf
            trials.append(Trial(int(d["number"]), d["params"], value, d["status"]))
        return cls(0 if file_seed is None else int(file_seed), trials)


# -- Parzen estimator ---------------------------------------------------------------


def _bandwidth(obs: np.ndarray, lo: float, hi: float) -> float:
    width = hi - lo
    if obs.size < 2:
        return 0.25 * width
    h = 1.06 * float(np.std(obs)) * obs.size ** (-0.2)
    return float(min(max(h, 0.01 * width), width))


class _Parzen:
    """Mixture of Gaussians truncated to [lo, hi]: one per observation plus a prior."""

    def __init__(self, obs, lo, hi):
        obs = np.asarray(obs, dtype=np.float64)
        h = _bandwidth(obs, lo, hi)
        self.mu = np.concatenate([obs, [(lo + hi) / 2.0]])
        self.sigma = np.concatenate([np.full(obs.size, h), [hi - lo]])
        self.weights = np.full(self.mu.size, 1.0 / self.mu.size)
        self.lo, self.hi = lo, hi
        self.cdf_lo = ndtr((lo - self.mu) / self.sigma)
        self.mass = ndtr((hi - self.mu) / self.sigma) - self.cdf_lo

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        comp = rng.choice(self.mu.size, size=size, p=self.weights)
        u = self.cdf_lo[comp] + rng.random(size) * self.mass[comp]
        u = np.clip(u, 1e-300, 1 - 1e-16)
        x = self.mu[comp] + self.sigma[comp] * ndtri(u)
        return np.clip(x, self.lo, self.hi)

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[:, None]
        z = (x - self.mu) / self.sigma
        dens = np.exp(-0.5 * z * z) / (math.sqrt(2 * math.pi) * self.sigma * self.mass)
        return np.log(np.maximum((dens * self.weights).sum(axis=1), 1e-300))


def _prior_sample(space: SearchSpace, rng: np.random.Generator) -> dict:
    return {p.name: p.snap(rng.uniform(p.lo, p.hi)) for p in space.params}


def suggest(history: TrialHistory, space: SearchSpace, gamma: float = GAMMA,
            n_candidates: int = N_CANDIDATES, n_startup: int = N_STARTUP) -> dict:
    """Next parameter vector for trial ``len(history.trials)``."""
    if not 0.0 < gamma < 1.0:
        raise InvalidConfig("gamma must lie in (0, 1)")
    if not space.params:
        raise EmptySpace("search space has no parameters")
    rng = np.random.default_rng([history.seed, len(history.trials)])
    done = history.completed()
    if len(done) < max(n_startup, 2):
        return _prior_sample(space, rng)
    ranked = sorted(done, key=lambda t: (-t.value, t.number))
    n_good = max(1, int(math.ceil(gamma * len(ranked))))
    good, bad = ranked[:n_good], ranked[n_good:]
    score = np.zeros(n_candidates)
    cands = {}
    for p in space.params:
        l_est = _Parzen([t.params[p.name] for t in good], p.lo, p.hi)
        g_est = _Parzen([t.params[p.name] for t in bad], p.lo, p.hi)
        x = np.array([p.snap(v) for v in l_est.sample(rng, n_candidates)])
        cands[p.name] = x
        score += l_est.log_pdf(x) - g_est.log_pdf(x)
    best = int(np.argmax(score))
    return {p.name: float(cands[p.name][best]) for p in space.params}


def optimize(objective: Callable[[dict], float], space: SearchSpace, n_trials: int,
             seed: int = 0, history: TrialHistory | None = None, **tpe_kw):
    """Run ``n_trials`` further suggest/evaluate rounds; returns (best params, best value, history).

    An objective that raises is recorded as a failed trial scoring ``-inf``.
    """
    if n_trials < 1:
        raise InvalidConfig("n_trials must be >= 1")
    history = history if history is not None else TrialHistory(seed)
    for _ in range(n_trials):
        number = len(history.trials)
        params = suggest(history, space, **tpe_kw)
        try:
            value = float(objective(params))
            if math.isnan(value):
                raise ValueError("objective returned NaN")
            history.trials.append(Trial(number, params, value, "ok"))
        except Exception as exc:  # noqa: BLE001 - a failing trial must not stop the search
            logger.warning("%s", ObjectiveFailure(number, exc))
            history.trials.append(Trial(number, params, -math.inf, "fail"))
    best = history.best()
    if best is None:
        return None, -math.inf, history
    return dict(best.params), best.value, history


# -- meta-model space -------------------------------------------------------------


def meta_search_space() -> SearchSpace:
    """Search space for the stacking meta-model (names match ``GbdtParams`` fields)."""
    return SearchSpace((
        Param("n_estimators", "quniform", 100, 5000, 100),
        Param("learning_rate", "uniform", 0.001, 0.05),
        Param("max_leaves", "quniform", 10, 80, 2),
        Param("max_depth", "quniform", 3, 10, 1),
        Param("feature_fraction", "uniform", 0.6, 0.9),
        Param("bagging_fraction", "uniform", 0.6, 0.9),
        Param("l1", "uniform", 0.1, 10.0),
        Param("l2", "uniform", 0.1, 10.0),
    ))


INTEGER_PARAMS = ("n_estimators", "max_leaves", "max_depth")


def to_gbdt_changes(vector: dict) -> dict:
    return {k: int(round(v)) if k in INTEGER_PARAMS else float(v) for k, v in vector.items()}
