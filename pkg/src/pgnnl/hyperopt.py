"""Hyperparameter search (random or GP expected improvement) and the
lambda_phy Pareto sweep."""

from __future__ import annotations

import csv
import json
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, DivergenceError

KINDS = ("int", "uniform", "loguniform", "categorical")


@dataclass(frozen=True)
class Param:
    """One search dimension.

    ``kind`` is ``int`` (inclusive bounds), ``uniform``, ``loguniform`` or
    ``categorical`` (``choices`` holds the options).
    """

    kind: str
    low: float = 0.0
    high: float = 1.0
    choices: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown parameter kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.choices:
                raise ConfigError("categorical parameter needs choices")
            object.__setattr__(self, "choices", tuple(self.choices))
            return
        if not self.low <= self.high:
            raise ConfigError(f"empty range [{self.low}, {self.high}]")
        if self.kind == "loguniform" and self.low <= 0:
            raise ConfigError("loguniform bounds must be positive")
        if self.kind == "int" and (int(self.low) != self.low or int(self.high) != self.high):
            raise ConfigError("int bounds must be integers")

    def sample(self, rng: np.random.Generator):
        if self.kind == "int":
            return int(rng.integers(int(self.low), int(self.high) + 1))
        if self.kind == "uniform":
            return float(rng.uniform(self.low, self.high))
        if self.kind == "loguniform":
            return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))
        return self.choices[int(rng.integers(len(self.choices)))]

    def encode(self, value) -> float:
        """Map a value into [0, 1] for the surrogate."""
        if self.kind == "categorical":
            k = len(self.choices)
            return self.choices.index(value) / (k - 1) if k > 1 else 0.5
        lo, hi, v = float(self.low), float(self.high), float(value)
        if self.kind == "loguniform":
            lo, hi, v = math.log(lo), math.log(hi), math.log(v)
        if self.kind == "int":
            return (v - lo + 0.5) / (hi - lo + 1.0)
        return (v - lo) / (hi - lo) if hi > lo else 0.5

    def contains(self, value) -> bool:
        if self.kind == "categorical":
            return value in self.choices
        if self.kind == "int" and int(value) != value:
            return False
        return self.low <= value <= self.high

    def to_dict(self) -> dict:
        if self.kind == "categorical":
            return {"kind": self.kind, "choices": list(self.choices)}
        return {"kind": self.kind, "low": self.low, "high": self.high}

    @classmethod
    def from_dict(cls, d: dict) -> "Param":
        d = dict(d)
        extra = set(d) - {"kind", "low", "high", "choices"}
        if extra:
            raise ConfigError(f"unknown parameter keys {sorted(extra)}")
        if "choices" in d:
            d["choices"] = tuple(tuple(c) if isinstance(c, list) else c for c in d["choices"])
        return cls(**d)


@dataclass(frozen=True)
class SearchSpace:
    params: Dict[str, Param]

    def __post_init__(self):
        if not self.params:
            raise ConfigError("search space is empty")

    @property
    def names(self) -> List[str]:
        return sorted(self.params)

    def sample(self, rng: np.random.Generator) -> dict:
        return {k: self.params[k].sample(rng) for k in self.names}

    def encode(self, config: dict) -> np.ndarray:
        return np.array([self.params[k].encode(config[k]) for k in self.names])

    def contains(self, config: dict) -> bool:
        return set(config) == set(self.params) and all(self.params[k].contains(v) for k, v in config.items())

    def to_dict(self) -> dict:
        return {k: self.params[k].to_dict() for k in self.names}

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls({k: Param.from_dict(v) for k, v in d.items()})


@dataclass
class TrialRecord:
    index: int
    config: dict
    objective: float
    L_error: Optional[float] = None
    L_phy: Optional[float] = None
    seed: int = 0
    wall_time: float = 0.0
    failed: bool = False
    error: str = ""

    def to_dict(self, with_time: bool = False) -> dict:
        """Wall time is left out by default so logs are reproducible."""
        d = {"index": self.index, "config": self.config,
             "objective": None if self.failed else self.objective,
             "L_error": self.L_error, "L_phy": self.L_phy, "seed": self.seed,
             "failed": self.failed, "error": self.error}
        if with_time:
            d["wall_time"] = self.wall_time
        return d


class SearchFailed(RuntimeError):
    pass


def _se_kernel(A, B, length: float):
    d2 = np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :] - 2.0 * A @ B.T
    return np.exp(-0.5 * np.maximum(d2, 0.0) / length ** 2)


def gp_posterior(X, y, Xq, length: float = 0.2, noise: float = 1e-6):
    """Mean and std of a zero-mean GP (unit-variance SE kernel) on
    standardized targets, mapped back to the scale of ``y``."""
    X, Xq = np.atleast_2d(X), np.atleast_2d(Xq)
    y = np.asarray(y, dtype=float)
    mu_y = y.mean()
    sd_y = y.std() if y.std() > 0 else 1.0
    yn = (y - mu_y) / sd_y
    K = _se_kernel(X, X, length) + noise * np.eye(len(X))
    L = np.linalg.cholesky(K)
    alpha = np.linalg.solve(L.T, np.linalg.solve(L, yn))
    Ks = _se_kernel(Xq, X, length)
    mean = Ks @ alpha
    v = np.linalg.solve(L, Ks.T)
    var = np.maximum(1.0 - np.sum(v * v, axis=0), 1e-12)
    return mu_y + sd_y * mean, sd_y * np.sqrt(var)


def expected_improvement(mean, std, best: float):
    """EI for minimization."""
    z = (best - mean) / std
    return (best - mean) * ndtr(z) + std * np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def search(space: SearchSpace, objective: Callable, budget: int, strategy: str = "surrogate", seed: int = 0,
           n_init: Optional[int] = None, n_candidates: int = 512, length_scale: float = 0.2,
           noise: float = 1e-6, log_path=None):
    """Minimize ``objective(config, seed)`` over ``space``.

    The objective returns a float or a ``(value, extras)`` pair where
    extras may carry ``L_error``/``L_phy``.  Trial ``i`` runs with seed
    ``seed + i``.  Exceptions and non-finite values mark a trial as failed.
    Returns ``(best_record, records)``.
    """
    if budget < 1:
        raise ConfigError("budget must be at least 1")
    if strategy not in ("random", "surrogate"):
        raise ConfigError(f"unknown strategy {strategy!r}")
    rng = np.random.default_rng(seed)
    if n_init is None:
        n_init = min(budget, max(2, budget // 4))
    records: List[TrialRecord] = []
    log = open(log_path, "w") if log_path is not None else None
    try:
        for i in range(budget):
            valid = [r for r in records if not r.failed]
            if strategy == "random" or len(valid) < max(n_init, 2) or i < n_init:
                config = space.sample(rng)
            else:
                cands = [space.sample(rng) for _ in range(n_candidates)]
                X = np.array([space.encode(r.config) for r in valid])
                y = np.array([r.objective for r in valid])
                Xq = np.array([space.encode(c) for c in cands])
                mean, std = gp_posterior(X, y, Xq, length_scale, noise)
                config = cands[int(np.argmax(expected_improvement(mean, std, float(y.min()))))]
            records.append(_run_trial(i, config, objective, seed + i))
            if log is not None:
                log.write(json.dumps(records[-1].to_dict(), sort_keys=True) + "\n")
                log.flush()
    finally:
        if log is not None:
            log.close()
    valid = [r for r in records if not r.failed]
    if not valid:
        msgs = "; ".join(f"trial {r.index}: {r.error}" for r in records)
        raise SearchFailed(f"all {len(records)} trials failed: {msgs}")
    best = min(valid, key=lambda r: (r.objective, r.index))
    return best, records


def _run_trial(index, config, objective, seed) -> TrialRecord:
    t0 = time.perf_counter()
    extras = {}
    try:
        out = objective(dict(config), seed)
        if isinstance(out, tuple):
            out, extras = out
        value = float(out)
        failed = not math.isfinite(value)
        err = "" if not failed else "non-finite objective"
    except (DivergenceError, FloatingPointError, ValueError, np.linalg.LinAlgError) as e:
        value, failed, err = math.inf, True, f"{type(e).__name__}: {e}"
    return TrialRecord(index, dict(config), value, extras.get("L_error"), extras.get("L_phy"), seed,
                       time.perf_counter() - t0, failed, err)


def write_trial_log(path, records: Sequence[TrialRecord]):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


# PGNN objective --------------------------------------------------------------

PGNN_KEYS = {"lambda_phy", "hidden_width", "hidden_layers", "lr", "activation", "epochs", "batch_size"}


def apply_trial_config(base_cfg, config: dict):
    """Overlay a sampled configuration onto a :class:`PgnnConfig`."""
    unknown = set(config) - PGNN_KEYS
    if unknown:
        raise ConfigError(f"unsupported search keys {sorted(unknown)}")
    kw = {}
    width = config.get("hidden_width", base_cfg.hidden[0])
    layers = config.get("hidden_layers", len(base_cfg.hidden))
    if "hidden_width" in config or "hidden_layers" in config:
        kw["hidden"] = (int(width),) * int(layers)
    for k in ("lambda_phy", "lr", "activation", "epochs", "batch_size"):
        if k in config:
            kw[k] = config[k]
    return replace(base_cfg, **kw)


def pgnn_objective(base_cfg, dataset, channel: int = 0):
    """Objective: closed-loop validation RMSE of a PGNN trained with the
    trial's configuration."""
    from .pgnn import rollout_rmse, train_pgnn, validation_losses

    def objective(config, seed):
        cfg = apply_trial_config(base_cfg, config)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            model, _ = train_pgnn(cfg, dataset, seed)
        le, lp, _ = validation_losses(model, dataset, "val")
        return rollout_rmse(model, dataset, "val", channel), {"L_error": le, "L_phy": lp}

    return objective


# Pareto sweep ----------------------------------------------------------------

@dataclass
class ParetoPoint:
    lambda_phy: float
    L_error: float
    L_phy: float
    nondominated: bool = False
    error: str = ""

    @property
    def failed(self) -> bool:
        return bool(self.error)


def nondominated_flags(points) -> np.ndarray:
    """``flags[i]`` is True iff no other point is <= in both coordinates
    and < in at least one.  Non-finite points are never flagged."""
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    ok = np.all(np.isfinite(P), axis=1)
    flags = np.zeros(len(P), dtype=bool)
    for i in np.flatnonzero(ok):
        q = P[ok]
        dominated = np.any(np.all(q <= P[i], axis=1) & np.any(q < P[i], axis=1))
        flags[i] = not dominated
    return flags


def pareto_sweep(lambda_grid, fixed_config, dataset, seed: int = 0, log_path=None) -> List[ParetoPoint]:
    """Train one model per lambda value (same seed and architecture) and
    report validation ``(L_error, L_phy)`` with non-domination flags."""
    from .pgnn import train_pgnn, validation_losses

    grid = [float(v) for v in lambda_grid]
    if not grid:
        raise ConfigError("lambda grid is empty")
    if any(not 0.0 <= v <= 1.0 for v in grid):
        raise ConfigError("lambda values must lie in [0, 1]")
    uniq = list(dict.fromkeys(grid))
    if len(uniq) < len(grid):
        warnings.warn(f"dropped {len(grid) - len(uniq)} duplicate lambda values", UserWarning, stacklevel=2)
    points = []
    for lam in uniq:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                model, _ = train_pgnn(replace(fixed_config, lambda_phy=lam), dataset, seed)
            le, lp, _ = validation_losses(model, dataset, "val")
            points.append(ParetoPoint(lam, le, lp))
        except (DivergenceError, FloatingPointError, ValueError) as e:
            points.append(ParetoPoint(lam, math.nan, math.nan, False, f"{type(e).__name__}: {e}"))
    flags = nondominated_flags([(p.L_error, p.L_phy) for p in points])
    for p, f in zip(points, flags):
        p.nondominated = bool(f)
    if log_path is not None:
        with open(log_path, "w") as fh:
            for i, p in enumerate(points):
                rec = TrialRecord(i, {"lambda_phy": p.lambda_phy}, p.L_error, p.L_error, p.L_phy, seed,
                                  failed=p.failed, error=p.error)
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    return points


def write_pareto_csv(path, points: Sequence[ParetoPoint]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda_phy", "L_error", "L_phy", "nondominated"])
        for p in points:
            w.writerow([repr(p.lambda_phy), repr(p.L_error), repr(p.L_phy), int(p.nondominated)])


def default_pgnn_space() -> SearchSpace:
    """Architecture, learning rate and physics weight."""
    return SearchSpace({
        "hidden_width": Param("int", 2, 128),
        "hidden_layers": Param("int", 1, 3),
        "lr": Param("loguniform", 1e-4, 1e-2),
        "lambda_phy": Param("uniform", 0.01, 0.99),
        "activation": Param("categorical", choices=("tanh", "relu")),
    })
