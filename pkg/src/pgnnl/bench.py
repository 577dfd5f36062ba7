"""Benchmark harness: golf and valve studies, reduced-data study, reports."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .datakit import Dataset, Excitation, generate_signal, simulate_measurement, split_60_20_20, transient_window
from .errors import ConfigError
from .physloss import EnergyModel, delta_energy, energy_model_for
from .pgnn import PgnnConfig, baseline_config, predict_rollout, rollout_rmse, train_pgnn
from .plants import GolfParams, PlantModel, ValveParams, build_plant, integrate, make_prior
from .sindy import GOLF_LIBRARY, VALVE_LIBRARY, select_threshold, sindy_rollout

METHODS = ("prior", "nn", "sindyc", "pgnn-l")


def rmse(predicted, reference, channel: Optional[int] = 0) -> float:
    """Root-mean-squared error on one output channel (``None``: all channels)."""
    p = np.asarray(predicted, dtype=float)
    r = np.asarray(reference, dtype=float)
    if p.shape[0] != r.shape[0]:
        raise ValueError(f"length mismatch: {p.shape[0]} vs {r.shape[0]}")
    if p.shape != r.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {r.shape}")
    e = p - r
    if channel is not None and e.ndim == 2:
        e = e[:, channel]
    return float(np.sqrt(np.mean(e * e)))


@dataclass
class ExperimentConfig:
    """Everything a benchmark run depends on.

    ``priors`` maps a variant name to a degradation spec for
    :func:`make_prior`.  ``nn`` and ``pgnn`` hold :class:`PgnnConfig`
    field overrides; the PGNN-L weight is picked from ``lambda_grid`` by
    closed-loop validation RMSE.
    """

    plant: str
    true_params: dict
    priors: dict
    excitations: list
    dt: float
    n_steps: int
    noise: object
    split_mode: str
    eval_excitation: dict
    eval_steps: int
    eval_noise: object = 0.0
    methods: tuple = METHODS
    nn: dict = field(default_factory=dict)
    pgnn: dict = field(default_factory=dict)
    lambda_grid: tuple = (0.1, 0.3, 0.5)
    sindy_library: tuple = ()
    sindy_thresholds: tuple = (0.0, 1e-6, 1e-5, 1e-4, 1e-3)
    seed: int = 0

    def __post_init__(self):
        if self.plant not in ("golf", "valve"):
            raise ConfigError(f"unknown plant {self.plant!r}")
        self.methods = tuple(self.methods)
        self.lambda_grid = tuple(float(v) for v in self.lambda_grid)
        self.sindy_library = tuple(self.sindy_library) or (GOLF_LIBRARY if self.plant == "golf" else VALVE_LIBRARY)
        self.sindy_thresholds = tuple(float(v) for v in self.sindy_thresholds)
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ConfigError(f"unknown methods {sorted(bad)}")
        if not self.priors:
            raise ConfigError("at least one prior variant is required")
        if not self.lambda_grid or any(not 0 <= v <= 1 for v in self.lambda_grid):
            raise ConfigError("lambda_grid must be a nonempty list of values in [0, 1]")
        if self.dt <= 0 or self.n_steps < 5 or self.eval_steps < 1:
            raise ConfigError("dt must be > 0, n_steps >= 5 and eval_steps >= 1")
        for e in list(self.excitations) + [self.eval_excitation]:
            _excitation(e)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("methods", "lambda_grid", "sindy_library", "sindy_thresholds"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown experiment keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _excitation(d) -> Excitation:
    if isinstance(d, Excitation):
        return d
    try:
        return Excitation(**d)
    except TypeError as e:
        raise ConfigError(f"bad excitation {d!r}: {e}") from None


# the physics-guided variant used by the benchmarks: prior re-simulated one
# step from the fed-back state, network predicts a correction on top of it
PGNN_DEFAULTS = {"hidden": [16, 16], "epochs": 500, "lr": 3e-3, "adam_eps": 1e-12, "patience": 125,
                 "batch_size": 256, "prior_mode": "resync", "output_mode": "prior_residual"}
NN_DEFAULTS = {"hidden": [16, 16], "epochs": 500, "lr": 3e-3, "adam_eps": 1e-12, "patience": 125,
               "batch_size": 256}


def golf_default_config(seed: int = 0) -> ExperimentConfig:
    exc = [
        {"kind": "sine", "amplitude": 0.3, "frequency": 0.4},
        {"kind": "sine", "amplitude": 0.2, "frequency": 0.8},
        {"kind": "step", "amplitude": 0.25, "start": 0.5},
        {"kind": "step", "amplitude": -0.15, "start": 1.0},
        {"kind": "chirp", "amplitude": 0.3, "f0": 0.1, "f1": 2.0},
        {"kind": "chirp", "amplitude": 0.2, "f0": 0.2, "f1": 1.5},
    ]
    return ExperimentConfig(
        plant="golf", true_params={}, priors={"default": {"scale": {"mu": 0.5, "d": 0.5}}},
        excitations=exc, dt=1e-3, n_steps=4000, noise=[1e-5, 1e-4], split_mode="contiguous",
        eval_excitation={"kind": "chirp", "amplitude": 0.25, "f0": 0.15, "f1": 1.2}, eval_steps=4000,
        nn=dict(NN_DEFAULTS), pgnn=dict(PGNN_DEFAULTS), seed=seed)


def valve_default_config(seed: int = 0, limit_estimate: float = 1.2) -> ExperimentConfig:
    """Ten noisy steps at 2 kHz; gain in m/V; true limits at the placeholder
    magnitudes, prior B uses limits off by ``limit_estimate``."""
    base = ValveParams()
    lim = base.default_limits()
    true_params = {"K_V": base.K_V * base.y_max, "limits": {"v_max": lim.v_max, "a_max": lim.a_max}}
    est = {"v_max": lim.v_max * limit_estimate, "a_max": lim.a_max * limit_estimate}
    amps = [2.0, -3.0, 4.0, -5.0, 6.0, -7.0, 8.0, -9.0, 3.5, -6.5]
    return ExperimentConfig(
        plant="valve", true_params=true_params, priors={"A": {"drop": ["limits"]}, "B": {"limits": est}},
        excitations=[{"kind": "step", "amplitude": a, "start": 0.01} for a in amps], dt=5e-4, n_steps=200,
        noise="auto", split_mode="by_trajectory",
        eval_excitation={"kind": "step", "amplitude": 5.0, "start": 1.0}, eval_steps=4000,
        nn=dict(NN_DEFAULTS), pgnn=dict(PGNN_DEFAULTS, lambda_phy=0.3), lambda_grid=(0.3,),
        sindy_thresholds=(0.0, 1e-6, 1e-4, 1e-2), seed=seed)


def build_true_plant(cfg: ExperimentConfig) -> PlantModel:
    params = dict(cfg.true_params)
    if cfg.plant == "golf":
        spec = {"plant": "golf", "params": asdict(replace(GolfParams(), **params))}
    else:
        p = replace(ValveParams(), **params)
        d = asdict(p)
        d["u_range"] = list(p.u_range)
        spec = {"plant": "valve", "params": d}
    return build_plant(spec)


def build_prior(cfg: ExperimentConfig, variant: str) -> PlantModel:
    return make_prior(cfg.plant, cfg.priors[variant], base=build_true_plant(cfg).params)


def make_datasets(cfg: ExperimentConfig):
    """``(training dataset with split tags, evaluation dataset)``."""
    plant = build_true_plant(cfg)
    exc = [_excitation(e) for e in cfg.excitations]
    ds = simulate_measurement(plant, exc, cfg.dt, cfg.n_steps, cfg.noise, cfg.seed)
    ds = split_60_20_20(ds, cfg.split_mode, cfg.seed)
    ev = simulate_measurement(plant, _excitation(cfg.eval_excitation), cfg.dt, cfg.eval_steps, cfg.eval_noise,
                              cfg.seed + 1_000_003)
    return ds, ev


# reports ---------------------------------------------------------------------

def physics_consistency_report(rollout, em: EnergyModel, u, dt=None) -> dict:
    """Statistics of the per-step energy residual of a rollout (physical units)."""
    X = np.asarray(rollout, dtype=float)
    u = np.asarray(u, dtype=float).ravel()
    if len(X) < 2:
        return {"mean_abs": 0.0, "max_abs": 0.0, "p50": 0.0, "p90": 0.0, "p99": 0.0, "n": 0}
    r = np.abs(delta_energy(em, X[1:], X[:-1], u[:len(X) - 1]))
    return {"mean_abs": float(np.mean(r)), "max_abs": float(np.max(r)), "p50": float(np.percentile(r, 50)),
            "p90": float(np.percentile(r, 90)), "p99": float(np.percentile(r, 99)), "n": int(len(r))}


@dataclass
class Report:
    plant: str
    variant: str
    config_hash: str
    seed: int
    rmse: Dict[str, Optional[float]] = field(default_factory=dict)
    rmse_all: Dict[str, Optional[float]] = field(default_factory=dict)
    residuals: Dict[str, dict] = field(default_factory=dict)
    neurons: Dict[str, int] = field(default_factory=dict)
    lambda_phy: Optional[float] = None
    lambda_scores: list = field(default_factory=list)
    failures: Dict[str, str] = field(default_factory=dict)
    extra: Dict[str, dict] = field(default_factory=dict)
    t: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    reference: Optional[np.ndarray] = None
    rollouts: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"plant": self.plant, "variant": self.variant, "config_hash": self.config_hash, "seed": self.seed,
                "rmse": self.rmse, "rmse_all": self.rmse_all, "residuals": self.residuals,
                "neurons": self.neurons, "lambda_phy": self.lambda_phy, "lambda_scores": self.lambda_scores,
                "failures": self.failures, "extra": self.extra}

    def to_markdown(self) -> str:
        lines = [f"# {self.plant} benchmark ({self.variant})", "",
                 f"config hash `{self.config_hash}`, seed {self.seed}"
                 + (f", lambda_phy {self.lambda_phy:g}" if self.lambda_phy is not None else ""), "",
                 "| method | RMSE (ch. 1) | RMSE (all) | mean abs energy residual | neurons | status |",
                 "|---|---|---|---|---|---|"]
        for m in self.rmse:
            r, ra = self.rmse[m], self.rmse_all.get(m)
            res = self.residuals.get(m, {}).get("prior", {}).get("mean_abs")
            lines.append(f"| {m} | {_fmt(r)} | {_fmt(ra)} | {_fmt(res)} | {self.neurons.get(m, '-')} | "
                         f"{'failed: ' + self.failures[m] if m in self.failures else 'ok'} |")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "report"):
        os.makedirs(out_dir, exist_ok=True)
        _atomic_write(os.path.join(out_dir, f"{stem}.json"),
                      json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default) + "\n")
        _atomic_write(os.path.join(out_dir, f"{stem}.md"), self.to_markdown())
        for m, x in self.rollouts.items():
            rows = ["t,u," + ",".join(f"y{i + 1}" for i in range(x.shape[1]))
                    + "," + ",".join(f"ref{i + 1}" for i in range(x.shape[1]))]
            for k in range(len(x)):
                rows.append(",".join(repr(float(v)) for v in
                                     (self.t[k], self.u[k], *x[k], *self.reference[k])))
            _atomic_write(os.path.join(out_dir, f"{stem}_rollout_{m}.csv"), "\n".join(rows) + "\n")


def _fmt(v):
    if v is None:
        return "-"
    return f"{v:.4e}" if math.isfinite(v) else "inf"


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _atomic_write(path, text: str):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


# method runners ----------------------------------------------------------------

def _pgnn_config(prior: PlantModel, dt: float, overrides: dict, **kw) -> PgnnConfig:
    d = dict(overrides)
    d.update(kw)
    if "hidden" in d:
        d["hidden"] = tuple(d["hidden"])
    if "layout" in d:
        d["layout"] = tuple(d["layout"])
    try:
        return PgnnConfig(prior, dt, **d)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def _quiet_train(cfg, ds, seed):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return train_pgnn(cfg, ds, seed)


def train_tuned_pgnn(cfg: ExperimentConfig, prior: PlantModel, ds: Dataset):
    """Train one PGNN-L per grid value, keep the best closed-loop validation
    RMSE.  Returns ``(model, lambda, scores)``."""
    best, best_lam, best_score, scores = None, None, math.inf, []
    for lam in cfg.lambda_grid:
        pc = _pgnn_config(prior, cfg.dt, cfg.pgnn, lambda_phy=lam)
        try:
            model, _ = _quiet_train(pc, ds, cfg.seed)
            score = rollout_rmse(model, ds, "val", 0)
        except (FloatingPointError, ValueError) as e:
            scores.append([lam, None])
            continue
        score = score if math.isfinite(score) else math.inf
        scores.append([lam, score])
        if best is None or score < best_score:
            best, best_lam, best_score = model, lam, score
    if best is None:
        raise FloatingPointError("every lambda value failed")
    return best, best_lam, scores


def _evaluate(report: Report, name: str, fn, ev: Dataset, energies: dict):
    try:
        x = np.asarray(fn(), dtype=float)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("non-finite rollout")
    except (FloatingPointError, ValueError) as e:
        report.rmse[name] = math.inf
        report.rmse_all[name] = math.inf
        report.failures[name] = f"{type(e).__name__}: {e}"
        return None
    report.rollouts[name] = x
    report.rmse[name] = rmse(x, ev.y, 0)
    report.rmse_all[name] = rmse(x, ev.y, None)
    report.residuals[name] = {k: physics_consistency_report(x, em, ev.u) for k, em in energies.items()}
    return x


def _run(cfg: ExperimentConfig, ds: Dataset, ev: Dataset, variants: Sequence[str]) -> Dict[str, Report]:
    n = cfg.eval_steps
    x0, u = ev.y[0], ev.u
    truth = build_true_plant(cfg)
    shared: Dict[str, tuple] = {}
    if "sindyc" in cfg.methods:
        def sindy_fn():
            model, _ = select_threshold(ds, cfg.sindy_library, cfg.sindy_thresholds)
            shared["sindyc_terms"] = int(np.count_nonzero(model.xi))
            return sindy_rollout(model, u, x0, n)
        shared["sindyc"] = sindy_fn
    if "nn" in cfg.methods:
        def nn_fn():
            pc = baseline_config(_pgnn_config(build_prior(cfg, variants[0]), cfg.dt, cfg.nn, lambda_phy=0.0))
            model, _ = _quiet_train(pc, ds, cfg.seed)
            shared["nn_neurons"] = model.n_neurons
            return predict_rollout(model, u, x0, n)
        shared["nn"] = nn_fn
    cache: Dict[str, np.ndarray] = {}
    reports = {}
    for v in variants:
        prior = build_prior(cfg, v)
        energies = {"prior": energy_model_for(prior), "true": energy_model_for(truth)}
        rep = Report(cfg.plant, v, cfg.config_hash(), cfg.seed, t=ev.t, u=ev.u, reference=ev.y)
        for m in cfg.methods:
            if m == "prior":
                _evaluate(rep, m, lambda: integrate(prior, x0, u, cfg.dt, n).x, ev, energies)
                rep.neurons[m] = 0
            elif m == "pgnn-l":
                def pg_fn():
                    model, lam, scores = train_tuned_pgnn(cfg, prior, ds)
                    rep.lambda_phy, rep.lambda_scores = lam, scores
                    rep.neurons[m] = model.n_neurons
                    return predict_rollout(model, u, x0, n)
                _evaluate(rep, m, pg_fn, ev, energies)
            else:
                # prior-independent methods run once and are shared by all variants
                if m not in cache:
                    try:
                        cache[m] = np.asarray(shared[m](), dtype=float)
                    except (FloatingPointError, ValueError) as e:
                        cache[m] = e
                out = cache[m]
                if isinstance(out, Exception):
                    _evaluate(rep, m, lambda: (_ for _ in ()).throw(out), ev, energies)
                else:
                    _evaluate(rep, m, lambda: out, ev, energies)
                if m == "nn" and "nn_neurons" in shared:
                    rep.neurons[m] = shared["nn_neurons"]
                if m == "sindyc":
                    rep.neurons[m] = 0
        if cfg.plant == "valve":
            lim = build_true_plant(cfg).params.limits
            for m, x in rep.rollouts.items():
                vmax = float(np.max(np.abs(x[:, 1])))
                rep.extra[m] = {"max_abs_x1": float(np.max(np.abs(x[:, 0]))), "max_abs_x2": vmax,
                                "v_limit_excess": (vmax - lim.v_max) if lim is not None else None}
        reports[v] = rep
    return reports


def run_golf_benchmark(cfg: Optional[ExperimentConfig] = None) -> Report:
    """Train and evaluate every configured method against the golf prior."""
    cfg = cfg or golf_default_config()
    if cfg.plant != "golf":
        raise ConfigError("run_golf_benchmark needs a golf configuration")
    ds, ev = make_datasets(cfg)
    variant = next(iter(cfg.priors))
    return _run(cfg, ds, ev, [variant])[variant]


def run_valve_benchmark(cfg: Optional[ExperimentConfig] = None) -> Dict[str, Report]:
    """One report per prior variant (e.g. ``A`` without, ``B`` with limits)."""
    cfg = cfg or valve_default_config()
    if cfg.plant != "valve":
        raise ConfigError("run_valve_benchmark needs a valve configuration")
    ds, ev = make_datasets(cfg)
    return _run(cfg, ds, ev, list(cfg.priors))


def run_reduced_data_study(cfg: Optional[ExperimentConfig] = None, fraction: float = 0.15):
    """SINDYc and PGNN-L on full data and on the first ``fraction`` of every
    trajectory.  Returns ``(full_report, transient_report)``."""
    cfg = cfg or golf_default_config()
    methods = tuple(m for m in cfg.methods if m in ("sindyc", "pgnn-l"))
    cfg = replace(cfg, methods=methods)
    plant = build_true_plant(cfg)
    exc = [_excitation(e) for e in cfg.excitations]
    raw = simulate_measurement(plant, exc, cfg.dt, cfg.n_steps, cfg.noise, cfg.seed)
    _, ev = make_datasets(cfg)
    variant = next(iter(cfg.priors))
    full = _run(cfg, split_60_20_20(raw, cfg.split_mode, cfg.seed), ev, [variant])[variant]
    short = _run(cfg, split_60_20_20(transient_window(raw, fraction), cfg.split_mode, cfg.seed), ev,
                 [variant])[variant]
    short.extra["transient_fraction"] = {"value": fraction}
    return full, short


def degradation_factors(full: Report, short: Report) -> Dict[str, float]:
    """``rmse(short) / rmse(full)`` per method (``inf`` when a run failed)."""
    out = {}
    for m in full.rmse:
        a, b = full.rmse.get(m), short.rmse.get(m)
        if a is None or b is None or not math.isfinite(a) or a == 0:
            out[m] = math.nan
        else:
            out[m] = b / a if math.isfinite(b) else math.inf
    return out
