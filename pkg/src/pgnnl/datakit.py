"""Excitation signals, synthetic measurements, splitting, standardization and
snapshot matrices."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, SplitError
from .plants import PlantModel, integrate

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class Excitation:
    """Input signal description.

    ``kind`` is ``step``, ``sine`` or ``chirp``.  Every signal is zero
    before ``start`` and ``offset + shape(t - start)`` afterwards.  A chirp
    sweeps its instantaneous frequency linearly from ``f0`` to ``f1`` over
    ``duration`` seconds (the whole signal when ``duration`` is None).
    """

    kind: str
    amplitude: float = 1.0
    frequency: float = 1.0
    f0: float = 0.0
    f1: float = 1.0
    offset: float = 0.0
    start: float = 0.0
    duration: Optional[float] = None
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in ("step", "sine", "chirp"):
            raise ConfigError(f"unknown excitation kind {self.kind!r}")
        if not math.isfinite(self.amplitude):
            raise ConfigError("amplitude must be finite")
        if self.kind == "chirp" and not (self.f1 >= self.f0 >= 0):
            raise ConfigError(f"chirp requires f1 >= f0 >= 0, got f0={self.f0}, f1={self.f1}")
        if self.kind == "sine" and self.frequency < 0:
            raise ConfigError("frequency must be >= 0")

    def to_dict(self):
        return asdict(self)


def generate_signal(e: Excitation, dt: float, n_steps: int) -> np.ndarray:
    """Sample ``e`` on ``t_k = k*dt`` for ``k = 0..n_steps``."""
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    t = np.arange(n_steps + 1) * dt
    tau = t - e.start
    on = tau >= -1e-9 * dt
    tau = np.where(on, tau, 0.0)
    if e.kind == "step":
        shape = np.full_like(t, e.amplitude)
    elif e.kind == "sine":
        shape = e.amplitude * np.sin(2 * np.pi * e.frequency * tau + e.phase)
    else:
        T = e.duration if e.duration is not None else max(n_steps * dt - e.start, dt)
        tau_c = np.minimum(tau, T)
        phase = 2 * np.pi * (e.f0 * tau_c + 0.5 * (e.f1 - e.f0) / T * tau_c ** 2)
        # beyond the sweep keep oscillating at f1
        phase = phase + 2 * np.pi * e.f1 * (tau - tau_c)
        shape = e.amplitude * np.sin(phase + e.phase)
    return np.where(on, e.offset + shape, 0.0)


class Standardizer:
    """Per-channel affine map ``z = (v - mean) / std``."""

    def __init__(self, mean, std):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.std = np.atleast_1d(np.asarray(std, dtype=float))

    @classmethod
    def fit(cls, values) -> "Standardizer":
        v = np.asarray(values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if len(v) == 0:
            raise ValueError("cannot fit a standardizer on no data")
        mean = v.mean(axis=0)
        std = v.std(axis=0)
        bad = ~(std > 0)
        if np.any(bad):
            warnings.warn(f"constant channel(s) {np.flatnonzero(bad).tolist()}: std replaced by 1",
                          RuntimeWarning, stacklevel=2)
            std = np.where(bad, 1.0, std)
        return cls(mean, std)

    def apply(self, v):
        return (np.asarray(v, dtype=float) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=float) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"])

    def __eq__(self, other):
        return (isinstance(other, Standardizer) and np.array_equal(self.mean, other.mean)
                and np.array_equal(self.std, other.std))

    def __repr__(self):
        return f"Standardizer(mean={self.mean.tolist()}, std={self.std.tolist()})"


@dataclass
class Dataset:
    """Time-indexed records ``(t_k, u_k, y_k)`` from one or more trajectories.

    Arrays are row-aligned: ``t``, ``u``, ``traj_id`` and ``split`` have
    shape (N,), ``y`` has shape (N, l).  ``split`` entries are "train",
    "val", "test" or "" (untagged).
    """

    t: np.ndarray
    u: np.ndarray
    y: np.ndarray
    traj_id: np.ndarray
    dt: float
    split: Optional[np.ndarray] = None
    standardizer: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        self.traj_id = np.asarray(self.traj_id, dtype=int)
        n = len(self.t)
        if not (len(self.u) == len(self.y) == len(self.traj_id) == n):
            raise ShapeError("t, u, y and traj_id must have equal lengths")
        if self.split is None:
            self.split = np.array([""] * n, dtype=object)
        else:
            self.split = np.asarray(self.split, dtype=object)
            if len(self.split) != n:
                raise ShapeError("split must have one tag per record")

    def __len__(self):
        return len(self.t)

    @property
    def n_outputs(self) -> int:
        return self.y.shape[1]

    def trajectory_ids(self):
        # order of first appearance
        _, first = np.unique(self.traj_id, return_index=True)
        return [int(self.traj_id[i]) for i in np.sort(first)]

    def trajectory_slices(self):
        """List of (traj_id, index array) in order of appearance."""
        return [(tid, np.flatnonzero(self.traj_id == tid)) for tid in self.trajectory_ids()]

    def mask(self, split: str) -> np.ndarray:
        return self.split == split

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.t[idx], self.u[idx], self.y[idx], self.traj_id[idx], self.dt,
                       self.split[idx].copy(), dict(self.standardizer), dict(self.meta))

    def copy(self) -> "Dataset":
        return self.subset(np.arange(len(self)))

    @classmethod
    def concatenate(cls, parts: Sequence["Dataset"]) -> "Dataset":
        dts = {p.dt for p in parts}
        if len(dts) != 1:
            raise ValueError(f"cannot concatenate datasets with different dt: {sorted(dts)}")
        offset, ids = 0, []
        for p in parts:
            ids.append(p.traj_id - p.traj_id.min() + offset if len(p) else p.traj_id)
            offset = (ids[-1].max() + 1) if len(p) else offset
        return cls(np.concatenate([p.t for p in parts]), np.concatenate([p.u for p in parts]),
                   np.concatenate([p.y for p in parts]), np.concatenate(ids), parts[0].dt,
                   np.concatenate([p.split for p in parts]))

    def to_csv(self, path, sidecar=True):
        """Write ``t,u,y1..yl,split,traj_id`` plus a JSON sidecar."""
        l = self.n_outputs
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "u"] + [f"y{i + 1}" for i in range(l)] + ["split", "traj_id"])
            for k in range(len(self)):
                w.writerow([repr(float(self.t[k])), repr(float(self.u[k]))]
                           + [repr(float(v)) for v in self.y[k]]
                           + [self.split[k], int(self.traj_id[k])])
        if sidecar:
            with open(_sidecar_path(path), "w") as fh:
                json.dump(self.sidecar(), fh, indent=2, sort_keys=True)
                fh.write("\n")

    def sidecar(self) -> dict:
        return {
            "dt": self.dt,
            "seed": self.meta.get("seed"),
            "noise_std": self.meta.get("noise_std"),
            "standardizer": {k: v.to_dict() for k, v in self.standardizer.items()},
            "meta": {k: v for k, v in self.meta.items() if k not in ("seed", "noise_std")},
        }

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, rows = rows[0], rows[1:]
        l = len(header) - 4
        t = np.array([float(r[0]) for r in rows])
        u = np.array([float(r[1]) for r in rows])
        y = np.array([[float(v) for v in r[2:2 + l]] for r in rows]).reshape(len(rows), l)
        split = np.array([r[2 + l] for r in rows], dtype=object)
        tid = np.array([int(r[3 + l]) for r in rows])
        with open(_sidecar_path(path)) as fh:
            side = json.load(fh)
        meta = dict(side.get("meta", {}))
        meta["seed"] = side.get("seed")
        meta["noise_std"] = side.get("noise_std")
        std = {k: Standardizer.from_dict(v) for k, v in side.get("standardizer", {}).items()}
        return cls(t, u, y, tid, float(side["dt"]), split, std, meta)


def _sidecar_path(path):
    path = str(path)
    return (path[:-4] if path.endswith(".csv") else path) + ".json"


def simulate_measurement(true_plant: PlantModel, excitations, dt: float, n_steps: int,
                         noise_std=0.0, seed: int = 0, x0=None) -> Dataset:
    """Integrate ``true_plant`` under each excitation and add output noise.

    ``excitations`` is one :class:`Excitation` or a list (one trajectory
    each).  ``noise_std`` is a scalar or per-channel sequence of Gaussian
    standard deviations, or ``"auto"`` for 1 % of each channel's peak
    absolute value over all clean trajectories.
    """
    if isinstance(excitations, Excitation):
        excitations = [excitations]
    x0 = np.zeros(true_plant.state_dim) if x0 is None else np.asarray(x0, dtype=float)
    trajs = [integrate(true_plant, x0, generate_signal(e, dt, n_steps), dt, n_steps) for e in excitations]
    l = true_plant.state_dim
    if isinstance(noise_std, str):
        if noise_std != "auto":
            raise ConfigError(f"noise_std must be numeric or 'auto', got {noise_std!r}")
        peak = np.max([np.max(np.abs(tr.x), axis=0) for tr in trajs], axis=0)
        sigma = 0.01 * peak
    else:
        sigma = np.broadcast_to(np.asarray(noise_std, dtype=float), (l,)).copy()
    if np.any(sigma < 0) or not np.all(np.isfinite(sigma)):
        raise ConfigError(f"noise_std must be finite and >= 0, got {sigma}")
    rng = np.random.default_rng(seed)
    ts, us, ys, ids = [], [], [], []
    for i, tr in enumerate(trajs):
        y = tr.x.copy()
        if np.any(sigma > 0):
            y = y + rng.normal(size=y.shape) * sigma
        ts.append(tr.t)
        us.append(tr.u)
        ys.append(y)
        ids.append(np.full(len(tr.t), i))
    meta = {"seed": seed, "noise_std": sigma.tolist(), "plant": true_plant.spec,
            "excitations": [e.to_dict() for e in excitations], "n_steps": n_steps}
    return Dataset(np.concatenate(ts), np.concatenate(us), np.concatenate(ys),
                   np.concatenate(ids), dt, meta=meta)


def _split_counts(n: int):
    n_val = int(round(0.2 * n))
    n_test = int(round(0.2 * n))
    return n - n_val - n_test, n_val, n_test


def split_60_20_20(d: Dataset, mode: str = "contiguous", seed: int = 0) -> Dataset:
    """Return a copy of ``d`` with train/val/test tags.

    ``contiguous`` tags the first 60 % of every trajectory train, the next
    20 % val and the rest test.  ``by_trajectory`` assigns whole
    trajectories in a seeded random order; train takes the rounding
    remainder.
    """
    if len(d) < 5:
        raise SplitError(f"need at least 5 records to split, got {len(d)}")
    out = d.copy()
    split = np.empty(len(d), dtype=object)
    if mode == "contiguous":
        for _, idx in d.trajectory_slices():
            a, b, _ = _split_counts(len(idx))
            split[idx[:a]] = "train"
            split[idx[a:a + b]] = "val"
            split[idx[a + b:]] = "test"
    elif mode == "by_trajectory":
        ids = d.trajectory_ids()
        if len(ids) < 3:
            raise SplitError(f"by_trajectory needs at least 3 trajectories, got {len(ids)}")
        order = np.random.default_rng(seed).permutation(len(ids))
        a, b, _ = _split_counts(len(ids))
        for rank, j in enumerate(order):
            tag = "train" if rank < a else ("val" if rank < a + b else "test")
            split[d.traj_id == ids[j]] = tag
    else:
        raise ConfigError(f"unknown split mode {mode!r}")
    out.split = split
    out.meta["split_mode"] = mode
    return out


def fit_standardizer(d: Dataset, channels="y") -> Standardizer:
    """Fit on train-tagged records only.

    ``channels``: ``"u"``, ``"y"`` or a list of output indices.
    """
    m = d.mask("train")
    if not np.any(m):
        raise SplitError("dataset has no train-tagged records")
    if isinstance(channels, str):
        if channels == "u":
            values = d.u[m]
        elif channels == "y":
            values = d.y[m]
        else:
            raise ConfigError(f"unknown channel group {channels!r}")
    else:
        values = d.y[m][:, list(channels)]
    return Standardizer.fit(values)


@dataclass
class SnapshotMatrices:
    """``Y``/``Yp``: l x M states at k and k+1; ``U``: m x M inputs at k."""

    Y: np.ndarray
    Yp: np.ndarray
    U: np.ndarray


def check_uniform_dt(d: Dataset, rtol: float = 1e-9):
    for tid, idx in d.trajectory_slices():
        if len(idx) < 2:
            continue
        dts = np.diff(d.t[idx])
        if np.max(np.abs(dts - d.dt)) > rtol * d.dt + 1e-12 * np.max(np.abs(d.t[idx])):
            raise ValueError(f"trajectory {tid} is not sampled at dt={d.dt}")


def pair_indices(d: Dataset, split: Optional[str] = None) -> np.ndarray:
    """Indices ``k`` such that records k and k+1 are consecutive samples of
    one trajectory (and both carry tag ``split`` when given)."""
    same = d.traj_id[1:] == d.traj_id[:-1]
    if split is not None:
        same &= (d.split[1:] == split) & (d.split[:-1] == split)
    return np.flatnonzero(same)


def build_snapshots(d: Dataset, split: Optional[str] = None) -> SnapshotMatrices:
    if len(d) == 0:
        raise ValueError("empty dataset")
    check_uniform_dt(d)
    k = pair_indices(d, split)
    if len(k) == 0:
        raise ValueError("dataset has no consecutive sample pairs")
    return SnapshotMatrices(d.y[k].T.copy(), d.y[k + 1].T.copy(), d.u[k][None, :].copy())


def transient_window(d: Dataset, fraction: float) -> Dataset:
    """Keep the first ``fraction`` of every trajectory (at least 5 samples)."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    keep = []
    for _, idx in d.trajectory_slices():
        n = len(idx) if fraction == 1 else max(5, int(math.ceil(fraction * len(idx))))
        keep.append(idx[:n])
    out = d.subset(np.concatenate(keep))
    out.meta["transient_fraction"] = fraction
    return out


def split_segments(d: Dataset, split: Optional[str] = None):
    """Index arrays of maximal runs of consecutive samples that belong to one
    trajectory and (when given) carry tag ``split``."""
    n = len(d)
    if n == 0:
        return []
    ok = np.ones(n, dtype=bool) if split is None else (d.split == split)
    brk = np.r_[True, (d.traj_id[1:] != d.traj_id[:-1]) | (ok[1:] != ok[:-1])]
    starts = np.flatnonzero(brk)
    ends = np.r_[starts[1:], n]
    return [np.arange(s, e) for s, e in zip(starts, ends) if ok[s]]
