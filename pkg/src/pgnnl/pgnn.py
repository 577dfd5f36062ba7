"""Physics-guided network with an energy-balance loss (PGNN-L).

Training rows (teacher forcing), for step k >= 1 of every trajectory::

    input  = [std(u_{k-1}), std(x_phy_k), std(y_{k-1})]   (blocks per layout)
    target = std(y_k)

``u_{k-1}`` is the zero-order-hold input acting on the step that ends at
``t_k`` and ``x_phy`` is the open-loop simulation of the prior model started
from the measured first sample of the trajectory.  At prediction time the
network's own previous output replaces ``y_{k-1}``.

With ``output_mode="residual"`` the network output is an increment:
``std(y_k) = std(y_{k-1}) + inc_scale * net(...)``.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import nnet
from .datakit import Dataset, Standardizer, check_uniform_dt, split_segments
from .errors import ConfigError, DivergenceError
from .nnet import LossResult, Mlp, TrainSet
from .physloss import ComposedLossConfig, bound_constraint, composed_loss, energy_model_for
from .plants import PlantModel, build_plant, integrate, rk4_step

LAYOUT_BLOCKS = ("u", "x_phy", "y_prev")
FULL_LAYOUT = ("u", "x_phy", "y_prev")
NN_LAYOUT = ("u", "y_prev")
OUTPUT_MODES = ("residual", "absolute", "prior_residual")


@dataclass
class PgnnConfig:
    prior: PlantModel
    dt: float
    hidden: tuple = (16, 16)
    activation: str = "tanh"
    lambda_phy: float = 0.5
    layout: tuple = FULL_LAYOUT
    output_mode: str = "residual"
    epochs: int = 300
    batch_size: int = 256
    lr: float = 1e-3
    adam_eps: float = 1e-8
    patience: Optional[int] = 50
    energy_scale: object = "auto"
    position_bound: Optional[float] = None
    prior_degradation: dict = field(default_factory=dict)
    prior_mode: str = "open_loop"
    physics_pairs: str = "consecutive"

    def __post_init__(self):
        self.layout = tuple(self.layout)
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.layout or any(b not in LAYOUT_BLOCKS for b in self.layout):
            raise ConfigError(f"layout blocks must come from {LAYOUT_BLOCKS}, got {self.layout}")
        if list(self.layout) != [b for b in LAYOUT_BLOCKS if b in self.layout]:
            raise ConfigError(f"layout blocks must appear in the order {LAYOUT_BLOCKS}")
        if self.output_mode not in OUTPUT_MODES:
            raise ConfigError(f"unknown output_mode {self.output_mode!r}")
        if self.output_mode == "residual" and "y_prev" not in self.layout:
            raise ConfigError("residual output needs the y_prev block")
        if self.output_mode == "prior_residual" and ("x_phy" not in self.layout or self.prior_mode != "resync"):
            raise ConfigError("prior_residual output needs the x_phy block with prior_mode='resync'")
        if not self.hidden:
            raise ConfigError("at least one hidden layer is required")
        if self.prior_mode not in ("open_loop", "resync"):
            raise ConfigError(f"unknown prior_mode {self.prior_mode!r}")
        if self.physics_pairs not in ("consecutive", "input"):
            raise ConfigError(f"unknown physics_pairs {self.physics_pairs!r}")

    @property
    def n_outputs(self) -> int:
        return self.prior.state_dim

    def input_width(self) -> int:
        l = self.n_outputs
        return sum(1 if b == "u" else l for b in self.layout)


_PRIOR_CACHE: dict = {}


def _fingerprint(*arrays) -> str:
    h = hashlib.sha1()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def simulate_prior(prior: PlantModel, dataset: Dataset) -> np.ndarray:
    """Open-loop prior output for every record, restarted per trajectory from
    the first measured sample."""
    key = (json.dumps(prior.spec, sort_keys=True, default=str), dataset.dt,
           _fingerprint(dataset.u, dataset.y, dataset.traj_id))
    hit = _PRIOR_CACHE.get(key)
    if hit is not None:
        return hit.copy()
    out = np.empty_like(dataset.y)
    for _, idx in dataset.trajectory_slices():
        tr = integrate(prior, dataset.y[idx[0]], dataset.u[idx], dataset.dt, len(idx) - 1)
        out[idx] = tr.x
    if len(_PRIOR_CACHE) > 64:
        _PRIOR_CACHE.clear()
    _PRIOR_CACHE[key] = out
    return out.copy()


def prior_one_step(prior: PlantModel, dataset: Dataset) -> np.ndarray:
    """Prior prediction of every record from the previous measured record
    (row 0 of each trajectory is the measurement itself)."""
    key = ("resync", json.dumps(prior.spec, sort_keys=True, default=str), dataset.dt,
           _fingerprint(dataset.u, dataset.y, dataset.traj_id))
    hit = _PRIOR_CACHE.get(key)
    if hit is not None:
        return hit.copy()
    out = dataset.y.copy()
    same = np.flatnonzero(dataset.traj_id[1:] == dataset.traj_id[:-1])
    for k in same:
        x = rk4_step(prior, dataset.y[k], dataset.u[k], dataset.dt)
        out[k + 1] = prior.output(x) if prior.output is not None else x
    _PRIOR_CACHE[key] = out
    return out.copy()


@dataclass
class RawRows:
    u: np.ndarray        # (n,) input into the row's step
    x_phy: np.ndarray    # (n, l)
    y_prev: np.ndarray   # (n, l)
    y: np.ndarray        # (n, l) targets
    u_hold: np.ndarray   # (n,) input held from this row to the next
    tag: np.ndarray      # (n,) split tag or "" when the row straddles splits
    segment: np.ndarray  # (n,) run id: same trajectory and tag
    traj: np.ndarray

    def take(self, m) -> "RawRows":
        return RawRows(*(getattr(self, f)[m] for f in self.__dataclass_fields__))


def raw_rows(cfg: PgnnConfig, dataset: Dataset) -> RawRows:
    if abs(dataset.dt - cfg.dt) > 1e-12 * cfg.dt:
        raise ValueError(f"dataset dt={dataset.dt} does not match config dt={cfg.dt}")
    check_uniform_dt(dataset)
    if cfg.prior_mode == "resync":
        xp = prior_one_step(cfg.prior, dataset)
    else:
        xp = simulate_prior(cfg.prior, dataset)
    same = dataset.traj_id[1:] == dataset.traj_id[:-1]
    k = np.flatnonzero(same) + 1
    sp = dataset.split
    tag = np.where(sp[k] == sp[k - 1], sp[k], "").astype(object)
    brk = np.r_[True, (dataset.traj_id[k[1:]] != dataset.traj_id[k[:-1]]) | (tag[1:] != tag[:-1])
                | (k[1:] != k[:-1] + 1)] if len(k) else np.zeros(0, dtype=bool)
    segment = np.cumsum(brk) - 1
    return RawRows(dataset.u[k - 1].copy(), xp[k], dataset.y[k - 1].copy(), dataset.y[k].copy(),
                   dataset.u[k].copy(), tag, segment, dataset.traj_id[k].copy())


@dataclass
class PgnnModel:
    net: Mlp
    scalers: dict
    inc_scale: np.ndarray
    config: PgnnConfig
    energy_scale: float = 1.0
    history: list = field(default_factory=list)

    @property
    def prior(self) -> PlantModel:
        return self.config.prior

    @property
    def n_neurons(self) -> int:
        return self.net.n_hidden_neurons


def fit_scalers(cfg: PgnnConfig, rows: RawRows):
    train = rows.tag == "train"
    if not np.any(train):
        raise ValueError("no train-tagged rows")
    sc = {"u": Standardizer.fit(rows.u[train]), "y": Standardizer.fit(rows.y[train])}
    if "x_phy" in cfg.layout:
        sc["x_phy"] = Standardizer.fit(_prior_block(cfg, rows.x_phy[train], rows.y_prev[train]))
    zt = sc["y"].apply(rows.y[train])
    zp = sc["y"].apply(_base_state(cfg, rows.x_phy[train], rows.y_prev[train]))
    inc = np.std(zt - zp, axis=0)
    inc = np.where(inc > 0, inc, 1.0)
    return sc, inc


def _prior_block(cfg: PgnnConfig, x_phy, y_prev):
    # a re-synced prior differs from y_prev by one step; feed that increment
    return x_phy - y_prev if cfg.prior_mode == "resync" else x_phy


def _base_state(cfg: PgnnConfig, x_phy, y_prev):
    """State the network output is added to (residual output modes)."""
    return x_phy if cfg.output_mode == "prior_residual" else y_prev


def _inputs(cfg: PgnnConfig, scalers, u, x_phy, y_prev):
    blocks = []
    for b in cfg.layout:
        if b == "u":
            blocks.append(scalers["u"].apply(np.asarray(u).reshape(-1, 1)))
        elif b == "x_phy":
            blocks.append(scalers["x_phy"].apply(_prior_block(cfg, x_phy, y_prev)))
        else:
            blocks.append(scalers["y"].apply(y_prev))
    return np.hstack(blocks)


def _auto_energy_scale(rows: RawRows, em, y_scaler: Standardizer) -> float:
    """RMS sensitivity of the energy residual to a one-standard-deviation
    change of the predicted state, over the training rows.

    Dividing the residual by this puts the physics term in the same
    (standardized-state) units as the error term, so lambda_phy trades
    comparable quantities.
    """
    r = rows.take(rows.tag == "train")
    if len(r.y) == 0:
        return 1.0
    _, g_c, _ = em.residual_grad(r.y, r.y_prev, r.u)
    s = float(np.sqrt(np.mean(np.sum((g_c * y_scaler.std) ** 2, axis=1))))
    return s if s > 0 and math.isfinite(s) else 1.0


@dataclass
class PgnnTable:
    """Standardized training table plus the extras the composed loss needs."""

    inputs: np.ndarray
    targets: np.ndarray
    z_prev: np.ndarray
    z_base: np.ndarray
    u_hold: np.ndarray
    tag: np.ndarray
    segment: np.ndarray
    u_in: np.ndarray = None

    def __iter__(self):
        # allows ``inputs, targets = build_training_table(...)``
        return iter((self.inputs, self.targets))

    def train_set(self, split: str) -> TrainSet:
        m = self.tag == split
        return TrainSet(self.inputs[m], self.targets[m],
                        {"z_prev": self.z_prev[m], "z_base": self.z_base[m], "u_hold": self.u_hold[m], "u_in": self.u_in[m]},
                        self.segment[m])


def build_training_table(cfg: PgnnConfig, dataset: Dataset, scalers=None) -> PgnnTable:
    """Rows for every step k >= 1 of every trajectory (never across
    trajectory boundaries).  Scalers are fitted on train rows unless given."""
    rows = raw_rows(cfg, dataset)
    if scalers is None:
        scalers, _ = fit_scalers(cfg, rows)
    X = _inputs(cfg, scalers, rows.u, rows.x_phy, rows.y_prev)
    return PgnnTable(X, scalers["y"].apply(rows.y), scalers["y"].apply(rows.y_prev),
                     scalers["y"].apply(_base_state(cfg, rows.x_phy, rows.y_prev)),
                     rows.u_hold, rows.tag, rows.segment, rows.u)


def _loss_config(cfg: PgnnConfig, scalers, energy_scale: float, lambda_phy=None) -> ComposedLossConfig:
    constraints = []
    if cfg.position_bound is not None:
        constraints.append(bound_constraint(0, cfg.position_bound))
    lam = cfg.lambda_phy if lambda_phy is None else lambda_phy
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return ComposedLossConfig(lam, energy_model_for(cfg.prior), constraints, scalers["y"], energy_scale)


def make_loss(cfg: PgnnConfig, lcfg: ComposedLossConfig, inc_scale):
    residual = cfg.output_mode != "absolute"
    paired = cfg.physics_pairs == "input"

    def loss(out, targets, batch):
        pred = batch["z_base"] + out * inc_scale if residual else out
        if paired:
            res = composed_loss(lcfg, pred, targets, batch["u_in"], prev=batch["z_prev"])
        else:
            res = composed_loss(lcfg, pred, targets, batch["u_hold"], segments=batch.get("segments"))
        grad = res.grad * inc_scale if residual else res.grad
        return LossResult(res.total, grad, {"L_error": res.error_term, "L_phy": res.physics_term})

    return loss


def train_pgnn(cfg: PgnnConfig, dataset: Dataset, seed: int = 0):
    """Train on the dataset's train rows, early-stop on its val rows.

    Returns ``(model, history)``; history entries carry ``epoch``,
    ``L_error``, ``L_phy`` and ``total`` (training) plus ``val_*`` values.
    """
    rows = raw_rows(cfg, dataset)
    scalers, inc = fit_scalers(cfg, rows)
    if cfg.output_mode == "absolute":
        inc = np.ones(cfg.n_outputs)
    em = energy_model_for(cfg.prior)
    if cfg.energy_scale == "auto":
        escale = _auto_energy_scale(rows, em, scalers["y"])
    else:
        escale = float(cfg.energy_scale)
    table = build_training_table(cfg, dataset, scalers)
    tr, va = table.train_set("train"), table.train_set("val")
    if len(tr) == 0 or len(va) == 0:
        raise ValueError("train_pgnn needs nonempty train and val rows")
    lcfg = _loss_config(cfg, scalers, escale)
    loss = make_loss(cfg, lcfg, inc)
    net = nnet.init_mlp([cfg.input_width(), *cfg.hidden, cfg.n_outputs], cfg.activation, seed)
    try:
        net, hist = nnet.train(net, tr, va, loss, epochs=cfg.epochs, batch_size=cfg.batch_size, seed=seed,
                               patience=cfg.patience, adam={"lr": cfg.lr, "eps": cfg.adam_eps})
    except DivergenceError as e:
        e.history = _history_records(getattr(e, "history", []))
        raise
    history = _history_records(hist)
    model = PgnnModel(net, scalers, np.asarray(inc, dtype=float), cfg, escale, history)
    return model, history


def _history_records(hist):
    out = []
    for h in hist:
        rec = {"epoch": h["epoch"], "L_error": h["train_L_error"], "L_phy": h["train_L_phy"],
               "total": h["train_total"]}
        for k in ("val_L_error", "val_L_phy", "val_total"):
            if k in h:
                rec[k] = h[k]
        out.append(rec)
    return out


def baseline_config(cfg: PgnnConfig) -> PgnnConfig:
    """Plain autoregressive NN: layout (u, y_prev) and no physics term."""
    if cfg.lambda_phy != 0:
        warnings.warn("lambda_phy is ignored for the plain NN baseline", UserWarning, stacklevel=3)
    mode = "residual" if cfg.output_mode == "prior_residual" else cfg.output_mode
    return replace(cfg, layout=NN_LAYOUT, lambda_phy=0.0, position_bound=None, output_mode=mode,
                   prior_mode="open_loop")


def train_baseline_nn(cfg: PgnnConfig, dataset: Dataset, seed: int = 0):
    return train_pgnn(baseline_config(cfg), dataset, seed)


def validation_losses(model: PgnnModel, dataset: Dataset, split: str = "val"):
    """``(L_error, L_phy, total)`` of the teacher-forced rows of ``split``."""
    cfg = model.config
    table = build_training_table(cfg, dataset, model.scalers)
    ts = table.train_set(split)
    lcfg = _loss_config(cfg, model.scalers, model.energy_scale)
    res = nnet.evaluate(model.net, ts, make_loss(cfg, lcfg, model.inc_scale))
    return res.components["L_error"], res.components["L_phy"], res.value


def predict_rollout(model: PgnnModel, u_sequence, x0, n_steps: int) -> np.ndarray:
    """Closed-loop prediction; returns (n_steps + 1, l) with row 0 = ``x0``."""
    cfg = model.config
    u = np.asarray(u_sequence, dtype=float).ravel()
    if len(u) < n_steps:
        raise ValueError(f"u_sequence has {len(u)} samples, need {n_steps}")
    x0 = np.asarray(x0, dtype=float)
    l = cfg.n_outputs
    resync = "x_phy" in cfg.layout and cfg.prior_mode == "resync"
    prior = cfg.prior
    if "x_phy" in cfg.layout and not resync:
        x_phy = integrate(cfg.prior, x0, u[:n_steps], cfg.dt, n_steps).x
    else:
        x_phy = np.zeros((n_steps + 1, l))
    sc = model.scalers
    # pre-standardize the open-loop blocks
    zu = sc["u"].apply(u[:n_steps]).ravel() if "u" in cfg.layout else None
    zx = sc["x_phy"].apply(x_phy) if "x_phy" in cfg.layout and not resync else None
    ysc = sc["y"]
    residual = cfg.output_mode != "absolute"
    on_prior = cfg.output_mode == "prior_residual"
    inc = model.inc_scale
    W, B, acts = model.net.weights, model.net.biases, model.net.activations
    out = np.empty((n_steps + 1, l))
    out[0] = x0
    z = ysc.apply(x0)
    row = np.empty(cfg.input_width())
    for k in range(1, n_steps + 1):
        j = 0
        for b in cfg.layout:
            if b == "u":
                row[j] = zu[k - 1]
                j += 1
            elif b == "x_phy":
                if resync:
                    xs = rk4_step(prior, out[k - 1], u[k - 1], cfg.dt)
                    xs = prior.output(xs) if prior.output is not None else xs
                    row[j:j + l] = sc["x_phy"].apply(xs - out[k - 1])
                    if on_prior:
                        base = ysc.apply(xs)
                else:
                    row[j:j + l] = zx[k]
                j += l
            else:
                row[j:j + l] = z
                j += l
        a = row
        for Wi, bi, name in zip(W, B, acts):
            a = Wi @ a + bi
            if name == "tanh":
                a = np.tanh(a)
            elif name == "relu":
                a = np.maximum(a, 0.0)
        if on_prior:
            z = base + inc * a
        else:
            z = z + inc * a if residual else a
        if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > 1e12:
            raise DivergenceError(f"rollout diverged at step {k}", step=k)
        out[k] = ysc.invert(z)
    return out


def rollout_rmse(model, dataset: Dataset, split: str = "val", channel: Optional[int] = 0,
                 predictor=None) -> float:
    """Closed-loop RMSE over all segments of ``split`` (each restarted from
    its first measured sample).  ``predictor(u, x0, n)`` overrides the model."""
    pred_fn = predictor or (lambda u, x0, n: predict_rollout(model, u, x0, n))
    err, cnt = 0.0, 0
    for s in split_segments(dataset, split):
        if len(s) < 2:
            continue
        pred = pred_fn(dataset.u[s], dataset.y[s[0]], len(s) - 1)
        e = pred - dataset.y[s]
        if channel is not None:
            e = e[:, channel]
        err += float(np.sum(e * e))
        cnt += e.size
    if cnt == 0:
        raise ValueError(f"no {split!r} segments to evaluate")
    return math.sqrt(err / cnt)


# persistence ---------------------------------------------------------------

def _sidecar(path):
    path = str(path)
    return (path[:-5] if path.endswith(".json") else path) + ".pgnn.json"


def config_to_dict(cfg: PgnnConfig) -> dict:
    return {
        "prior": cfg.prior.spec, "dt": cfg.dt, "hidden": list(cfg.hidden), "activation": cfg.activation,
        "lambda_phy": cfg.lambda_phy, "layout": list(cfg.layout), "output_mode": cfg.output_mode,
        "epochs": cfg.epochs, "batch_size": cfg.batch_size, "lr": cfg.lr, "adam_eps": cfg.adam_eps,
        "patience": cfg.patience, "energy_scale": cfg.energy_scale, "position_bound": cfg.position_bound,
        "prior_degradation": cfg.prior_degradation, "prior_mode": cfg.prior_mode,
        "physics_pairs": cfg.physics_pairs,
    }


def config_from_dict(d: dict) -> PgnnConfig:
    d = dict(d)
    d["prior"] = build_plant(d["prior"])
    return PgnnConfig(**d)


def save_model(model: PgnnModel, path, metadata=None):
    """Network checkpoint at ``path`` plus ``<stem>.pgnn.json`` sidecar."""
    meta = dict(metadata or {})
    if model.history:
        last = model.history[-1]
        meta.setdefault("epochs_run", last["epoch"])
        meta.setdefault("final_losses", {k: v for k, v in last.items() if k != "epoch"})
    model.net.save(path, meta)
    side = {
        "config": config_to_dict(model.config),
        "scalers": {k: v.to_dict() for k, v in model.scalers.items()},
        "inc_scale": model.inc_scale.tolist(),
        "energy_scale": model.energy_scale,
    }
    with open(_sidecar(path), "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> PgnnModel:
    net = Mlp.load(path)
    with open(_sidecar(path)) as fh:
        side = json.load(fh)
    cfg = config_from_dict(side["config"])
    scalers = {k: Standardizer.from_dict(v) for k, v in side["scalers"].items()}
    return PgnnModel(net, scalers, np.array(side["inc_scale"], dtype=float), cfg, float(side["energy_scale"]))
