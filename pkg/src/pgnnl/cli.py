"""Command-line entry point.

Every command reads a strict JSON config (``--config``), writes into
``--out`` and snapshots the resolved configuration as
``resolved_config.json``.  Exit codes: 0 success, 2 configuration error,
3 numeric divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import warnings
from dataclasses import replace

import numpy as np

from . import bench, hyperopt
from .datakit import Dataset, Excitation, generate_signal, simulate_measurement
from .errors import ConfigError, DivergenceError, SplitError
from .pgnn import load_model, predict_rollout, save_model, train_baseline_nn, train_pgnn
from .plants import integrate
from .sindy import SindyModel, select_threshold, sindy_rollout

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4

TOP_KEYS = {"preset", "experiment", "seed", "dataset", "model", "method", "variant", "eval", "search", "sweep"}
METHOD_NAMES = ("nn", "pgnn-l", "sindyc")
DEFAULT_SWEEP = [round(0.01 + 0.07 * i, 2) for i in range(15)]


class RunConfig:
    """Parsed command configuration; paths are resolved against the config
    file's directory."""

    def __init__(self, raw: dict, base_dir: str, seed_override=None):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        self.raw = raw
        self.base_dir = base_dir
        seed = raw.get("seed", 0) if seed_override is None else seed_override
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
        self.seed = seed
        preset = raw.get("preset", "golf")
        if preset == "golf":
            exp = bench.golf_default_config(seed).to_dict()
        elif preset == "valve":
            exp = bench.valve_default_config(seed).to_dict()
        else:
            raise ConfigError(f"unknown preset {preset!r}")
        over = raw.get("experiment", {})
        if not isinstance(over, dict):
            raise ConfigError("'experiment' must be an object")
        exp.update(over)
        exp["seed"] = seed
        self.experiment = bench.ExperimentConfig.from_dict(exp)
        self.preset = preset

    def path(self, key):
        p = self.raw.get(key)
        if p is None:
            return None
        if not isinstance(p, str):
            raise ConfigError(f"'{key}' must be a path string")
        return p if os.path.isabs(p) else os.path.join(self.base_dir, p)

    def section(self, key, allowed):
        sec = self.raw.get(key, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"'{key}' must be an object")
        unknown = set(sec) - set(allowed)
        if unknown:
            raise ConfigError(f"unknown keys in '{key}': {sorted(unknown)}")
        return sec

    def resolved(self) -> dict:
        d = {k: v for k, v in self.raw.items() if k != "experiment"}
        d["preset"] = self.preset
        d["seed"] = self.seed
        d["experiment"] = self.experiment.to_dict()
        return d


def load_config(path, seed_override=None) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from None
    return RunConfig(raw, os.path.dirname(os.path.abspath(path)), seed_override)


def _write(path, text: str):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_json(path, obj):
    _write(path, json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n")


def _default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _save_dataset(ds: Dataset, path):
    """Atomic wrapper around :meth:`Dataset.to_csv` (CSV plus sidecar)."""
    d = os.path.dirname(path)
    stem = os.path.splitext(os.path.basename(path))[0]
    tmp = os.path.join(d, f".{stem}.tmp{os.getpid()}.csv")
    ds.to_csv(tmp)
    os.replace(tmp, path)
    os.replace(os.path.splitext(tmp)[0] + ".json", os.path.join(d, stem + ".json"))


def _dataset(cfg: RunConfig) -> Dataset:
    p = cfg.path("dataset")
    if p is None:
        ds, _ = bench.make_datasets(cfg.experiment)
        return ds
    if not os.path.exists(p):
        raise FileNotFoundError(f"dataset not found: {p}")
    ds = Dataset.from_csv(p)
    if not np.any(ds.split != ""):
        from .datakit import split_60_20_20
        ds = split_60_20_20(ds, cfg.experiment.split_mode, cfg.seed)
    return ds


def _variant(cfg: RunConfig) -> str:
    v = cfg.raw.get("variant", next(iter(cfg.experiment.priors)))
    if v not in cfg.experiment.priors:
        raise ConfigError(f"unknown prior variant {v!r}")
    return v


# commands ----------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, out: str, method=None):
    ds, ev = bench.make_datasets(cfg.experiment)
    _save_dataset(ds, os.path.join(out, "dataset.csv"))
    for i, (tid, idx) in enumerate(ds.trajectory_slices()):
        _save_dataset(ds.subset(idx), os.path.join(out, f"trajectory_{i:03d}.csv"))
    _save_dataset(ev, os.path.join(out, "evaluation.csv"))
    n_tr = len(ds.trajectory_ids())
    print(f"wrote {n_tr} trajectories, {len(ds)} samples, noise std {ds.meta['noise_std']} to {out}")


def _history_csv(history) -> str:
    keys = ["epoch", "L_error", "L_phy", "total", "val_L_error", "val_L_phy", "val_total"]
    return _csv_text(keys, [[h.get(k, "") for k in keys] for h in history])


def cmd_train(cfg: RunConfig, out: str, method=None):
    method = method or cfg.raw.get("method")
    if method not in METHOD_NAMES:
        raise ConfigError(f"--method must be one of {METHOD_NAMES}, got {method!r}")
    exp = cfg.experiment
    ds = _dataset(cfg)
    if method == "sindyc":
        model, scores = select_threshold(ds, exp.sindy_library, exp.sindy_thresholds)
        _write_json(os.path.join(out, "model.json"), model.to_dict())
        _write(os.path.join(out, "thresholds.csv"), _csv_text(["threshold", "val_rmse"], scores))
        print(f"SINDYc threshold {model.threshold:g}, {int(np.count_nonzero(model.xi))} active terms")
        return
    prior = bench.build_prior(exp, _variant(cfg))
    try:
        if method == "nn":
            pc = bench._pgnn_config(prior, exp.dt, exp.nn, lambda_phy=exp.nn.get("lambda_phy", 0.0))
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                model, history = train_baseline_nn(pc, ds, cfg.seed)
        else:
            lam = exp.pgnn.get("lambda_phy", exp.lambda_grid[0])
            pc = bench._pgnn_config(prior, exp.dt, exp.pgnn, lambda_phy=lam)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                model, history = train_pgnn(pc, ds, cfg.seed)
    except DivergenceError as e:
        _write(os.path.join(out, "history.csv"), _history_csv(getattr(e, "history", [])))
        raise
    save_model(model, os.path.join(out, "model.json"), {"method": method, "seed": cfg.seed})
    _write(os.path.join(out, "history.csv"), _history_csv(history))
    last = history[-1] if history else {}
    print(f"{method}: {len(history)} epochs, val L_error {last.get('val_L_error', float('nan')):.4g}")


def _load_any_model(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"model not found: {path}")
    side = (path[:-5] if path.endswith(".json") else path) + ".pgnn.json"
    if os.path.exists(side):
        return "pgnn", load_model(path)
    with open(path) as fh:
        d = json.load(fh)
    if "xi" in d:
        return "sindyc", SindyModel.from_dict(d)
    raise ConfigError(f"{path} is neither a network checkpoint nor a SINDYc model")


def cmd_eval(cfg: RunConfig, out: str, method=None):
    path = cfg.path("model")
    if path is None:
        raise ConfigError("'model' path is required for eval")
    kind, model = _load_any_model(path)
    sec = cfg.section("eval", ("excitation", "n_steps"))
    exp = cfg.experiment
    exc = bench._excitation(sec.get("excitation", exp.eval_excitation))
    n = int(sec.get("n_steps", exp.eval_steps))
    truth = bench.build_true_plant(exp)
    ref = simulate_measurement(truth, exc, exp.dt, n, exp.eval_noise, cfg.seed + 1_000_003)
    if kind == "pgnn":
        pred = predict_rollout(model, ref.u, ref.y[0], n)
    else:
        pred = sindy_rollout(model, ref.u, ref.y[0], n)
    l = pred.shape[1]
    header = ["t", "u"] + [f"y{i + 1}" for i in range(l)] + [f"ref{i + 1}" for i in range(l)]
    rows = [[ref.t[k], ref.u[k], *pred[k], *ref.y[k]] for k in range(len(pred))]
    _write(os.path.join(out, "rollout.csv"), _csv_text(header, rows))
    metrics = {"model": os.path.basename(path), "kind": kind, "n_steps": n,
               "rmse": bench.rmse(pred, ref.y, 0), "rmse_all": bench.rmse(pred, ref.y, None)}
    _write_json(os.path.join(out, "metrics.json"), metrics)
    print(f"rmse {metrics['rmse']:.6g} (all channels {metrics['rmse_all']:.6g})")


def cmd_bench(cfg: RunConfig, out: str, method=None):
    exp = cfg.experiment
    if exp.plant == "golf":
        reports = {"": bench.run_golf_benchmark(exp)}
    else:
        reports = bench.run_valve_benchmark(exp)
    for v, rep in reports.items():
        rep.write(out, "report" if not v else f"report_{v}")
        print(rep.to_markdown())


def cmd_sweep_lambda(cfg: RunConfig, out: str, method=None):
    sec = cfg.section("sweep", ("lambda_grid",))
    grid = sec.get("lambda_grid", DEFAULT_SWEEP)
    exp = cfg.experiment
    ds = _dataset(cfg)
    fixed = bench._pgnn_config(bench.build_prior(exp, _variant(cfg)), exp.dt, exp.pgnn,
                               lambda_phy=exp.lambda_grid[0])
    points = hyperopt.pareto_sweep(grid, fixed, ds, cfg.seed, log_path=os.path.join(out, "sweep_trials.jsonl"))
    tmp = os.path.join(out, f".pareto.tmp{os.getpid()}")
    hyperopt.write_pareto_csv(tmp, points)
    os.replace(tmp, os.path.join(out, "pareto.csv"))
    n_nd = sum(p.nondominated for p in points)
    print(f"{len(points)} lambda values, {n_nd} non-dominated")


def cmd_search(cfg: RunConfig, out: str, method=None):
    sec = cfg.section("search", ("space", "budget", "strategy"))
    space = hyperopt.SearchSpace.from_dict(sec.get("space", {"lambda_phy": {"kind": "uniform", "low": 0.0,
                                                                             "high": 1.0}}))
    budget = sec.get("budget", 5)
    if not isinstance(budget, int) or budget < 1:
        raise ConfigError("budget must be a positive integer")
    exp = cfg.experiment
    ds = _dataset(cfg)
    base = bench._pgnn_config(bench.build_prior(exp, _variant(cfg)), exp.dt, exp.pgnn,
                              lambda_phy=exp.lambda_grid[0])
    obj = hyperopt.pgnn_objective(base, ds)
    log = os.path.join(out, "trials.jsonl")
    tmp = log + f".tmp{os.getpid()}"
    best, records = hyperopt.search(space, obj, budget, sec.get("strategy", "surrogate"), cfg.seed, log_path=tmp)
    os.replace(tmp, log)
    _write_json(os.path.join(out, "best.json"), best.to_dict())
    print(f"best objective {best.objective:.6g} with {best.config}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "sweep-lambda": cmd_sweep_lambda,
    "search": cmd_search,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pgnnl", description="Hybrid physics/data system identification.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--out", default="out", help="output directory (created if missing)")
    ap.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    ap.add_argument("--method", choices=METHOD_NAMES, default=None, help="method for 'train'")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        os.makedirs(args.out, exist_ok=True)
        resolved = cfg.resolved()
        if args.method:
            resolved["method"] = args.method
        _write_json(os.path.join(args.out, "resolved_config.json"), resolved)
        COMMANDS[args.command](cfg, args.out, args.method)
    except (ConfigError, SplitError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, FloatingPointError) as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
