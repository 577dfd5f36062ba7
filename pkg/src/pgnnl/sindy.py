"""Discrete-time SINDYc: candidate library, STLSQ regression, rollout."""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import ConfigError, DivergenceError, ShapeError

_TERM_PATTERNS = [
    (re.compile(r"^1$"), "const"),
    (re.compile(r"^u$"), "u"),
    (re.compile(r"^y(\d+)$"), "y"),
    (re.compile(r"^(sin|cos|sign)\(y(\d+)\)$"), "fn"),
    (re.compile(r"^y(\d+)\^2$"), "sq"),
    (re.compile(r"^y(\d+)\*y(\d+)$"), "yy"),
    (re.compile(r"^y(\d+)\*u$"), "yu"),
    (re.compile(r"^u\^2$"), "usq"),
]

GOLF_LIBRARY = ("1", "y1", "y2", "u", "sin(y1)", "cos(y1)", "y2^2", "sign(y2)")
VALVE_LIBRARY = ("y1", "y2", "u")


def _term_fn(name: str):
    """Compile a term name into f(Y, u) with Y of shape (M, l), u (M,)."""
    for pat, kind in _TERM_PATTERNS:
        m = pat.match(name)
        if not m:
            continue
        if kind == "const":
            return lambda Y, u: np.ones(len(u))
        if kind == "u":
            return lambda Y, u: u.copy()
        if kind == "usq":
            return lambda Y, u: u * u
        if kind == "y":
            i = int(m.group(1)) - 1
            return lambda Y, u: Y[:, i].copy()
        if kind == "fn":
            f = {"sin": np.sin, "cos": np.cos, "sign": np.sign}[m.group(1)]
            i = int(m.group(2)) - 1
            return lambda Y, u: f(Y[:, i])
        if kind == "sq":
            i = int(m.group(1)) - 1
            return lambda Y, u: Y[:, i] ** 2
        if kind == "yy":
            i, j = int(m.group(1)) - 1, int(m.group(2)) - 1
            return lambda Y, u: Y[:, i] * Y[:, j]
        if kind == "yu":
            i = int(m.group(1)) - 1
            return lambda Y, u: Y[:, i] * u
    raise ConfigError(f"unknown library term {name!r}")


def _max_state_index(name: str) -> int:
    idx = [int(s) for s in re.findall(r"y(\d+)", name)]
    return max(idx) if idx else 0


@dataclass(frozen=True)
class LibrarySpec:
    """Ordered candidate-term names, e.g. ``("1", "y1", "sin(y1)", "u")``."""

    terms: tuple

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.terms:
            raise ConfigError("library spec is empty")
        for t in self.terms:
            _term_fn(t)

    @property
    def size(self) -> int:
        return len(self.terms)

    def n_states_required(self) -> int:
        return max(_max_state_index(t) for t in self.terms)


def build_library(spec: LibrarySpec, Y, U) -> np.ndarray:
    """Evaluate the library on snapshot columns.

    ``Y`` is l x M, ``U`` is m x M (or length M); returns Psi with shape
    M x kappa.
    """
    if not isinstance(spec, LibrarySpec):
        spec = LibrarySpec(tuple(spec))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    U = np.atleast_2d(np.asarray(U, dtype=float))
    if Y.shape[1] != U.shape[1]:
        raise ShapeError(f"Y has {Y.shape[1]} columns, U has {U.shape[1]}")
    if spec.n_states_required() > Y.shape[0]:
        raise ShapeError(f"library needs {spec.n_states_required()} states, Y has {Y.shape[0]}")
    Yt, u = Y.T, U[0]
    return np.column_stack([_term_fn(t)(Yt, u) for t in spec.terms])


def _lstsq(A, b):
    x, *_ = scipy.linalg.lstsq(A, b, lapack_driver="gelsd")
    return x


def fit_stlsq(Psi, Yp, threshold: float = 0.01, max_iter: int = 10, normalize: bool = False,
              return_history: bool = False):
    """Sequential thresholded least squares, one row of Xi per output.

    ``Psi`` is M x kappa, ``Yp`` is l x M.  Coefficients with magnitude below
    ``threshold`` are zeroed and the rest refitted until the active set
    stops changing.  With ``normalize`` the columns of ``Psi`` are scaled to
    unit RMS first (the threshold then applies to scaled coefficients) and
    the result is mapped back.
    """
    Psi = np.asarray(Psi, dtype=float)
    Yp = np.atleast_2d(np.asarray(Yp, dtype=float))
    M, kappa = Psi.shape
    if Yp.shape[1] != M:
        raise ShapeError(f"Yp has {Yp.shape[1]} columns, Psi has {M} rows")
    if M < kappa:
        warnings.warn(f"underdetermined regression: {M} rows < {kappa} candidates", RuntimeWarning, stacklevel=2)
    scale = np.ones(kappa)
    if normalize:
        scale = np.sqrt(np.mean(Psi * Psi, axis=0))
        scale[scale == 0] = 1.0
    A = Psi / scale
    Xi = np.zeros((Yp.shape[0], kappa))
    history = []
    for i in range(Yp.shape[0]):
        b = Yp[i]
        active = np.ones(kappa, dtype=bool)
        xi = np.zeros(kappa)
        sets = [active.copy()]
        for _ in range(max_iter):
            xi = np.zeros(kappa)
            if active.any():
                xi[active] = _lstsq(A[:, active], b)
            small = np.abs(xi) < threshold
            new_active = active & ~small
            xi[~new_active] = 0.0
            if np.array_equal(new_active, active):
                break
            active = new_active
            sets.append(active.copy())
        else:
            # last thresholding changed the set; refit once on the final set
            xi = np.zeros(kappa)
            if active.any():
                xi[active] = _lstsq(A[:, active], b)
                xi[np.abs(xi) < threshold] = 0.0
        if not active.any() or not np.any(xi):
            if np.any(b):
                warnings.warn(f"all coefficients of output {i} thresholded to zero", RuntimeWarning, stacklevel=2)
            xi = np.zeros(kappa)
        Xi[i] = xi / scale
        history.append(sets)
    return (Xi, history) if return_history else Xi


@dataclass
class SindyModel:
    xi: np.ndarray
    library: LibrarySpec
    threshold: float
    dt: float

    def step(self, y, u):
        psi = build_library(self.library, np.asarray(y, float)[:, None], np.array([[u]]))
        return self.xi @ psi[0]

    def to_dict(self):
        return {"library": list(self.library.terms), "xi": self.xi.tolist(),
                "threshold": self.threshold, "dt": self.dt}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["xi"], dtype=float), LibrarySpec(tuple(d["library"])),
                   float(d["threshold"]), float(d["dt"]))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def sindy_rollout(model: SindyModel, u_sequence, y0, n_steps: int) -> np.ndarray:
    """Iterate ``y[k+1] = Xi @ psi(y[k], u[k])``; returns (n_steps + 1, l)."""
    u = np.asarray(u_sequence, dtype=float).ravel()
    if len(u) < n_steps:
        raise ValueError(f"need {n_steps} inputs, got {len(u)}")
    xi = model.xi
    fns = [_term_fn(t) for t in model.library.terms]
    out = np.empty((n_steps + 1, xi.shape[0]))
    y = np.asarray(y0, dtype=float).copy()
    out[0] = y
    psi = np.empty(len(fns))
    for k in range(n_steps):
        Y = y[None, :]
        uk = u[k:k + 1]
        for j, f in enumerate(fns):
            psi[j] = f(Y, uk)[0]
        y = xi @ psi
        if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > 1e100:
            raise DivergenceError(f"SINDYc rollout diverged at step {k + 1}", step=k + 1)
        out[k + 1] = y
    return out


def fit_sindy(dataset, library=VALVE_LIBRARY, threshold: float = 0.01, split: Optional[str] = "train",
              max_iter: int = 10, normalize: bool = False) -> SindyModel:
    """Fit a one-step model on snapshot pairs of ``dataset`` (within ``split``)."""
    from .datakit import build_snapshots

    lib = library if isinstance(library, LibrarySpec) else LibrarySpec(tuple(library))
    snap = build_snapshots(dataset, split)
    Psi = build_library(lib, snap.Y, snap.U)
    xi = fit_stlsq(Psi, snap.Yp, threshold, max_iter, normalize)
    return SindyModel(xi, lib, threshold, dataset.dt)


def select_threshold(dataset, library, grid: Sequence[float], max_iter: int = 10, normalize: bool = False,
                     channel: int = 0):
    """Fit on train for every threshold in ``grid`` and keep the one with the
    lowest closed-loop RMSE over the validation segments.

    Returns ``(model, scores)``; diverging rollouts score ``inf``.
    """
    from .datakit import split_segments

    segs = [s for s in split_segments(dataset, "val") if len(s) >= 2]
    if not segs:
        raise ValueError("dataset has no validation segments")
    best, best_score, scores = None, np.inf, []
    for thr in grid:
        model = fit_sindy(dataset, library, thr, "train", max_iter, normalize)
        err, cnt = 0.0, 0
        try:
            for s in segs:
                pred = sindy_rollout(model, dataset.u[s], dataset.y[s[0]], len(s) - 1)
                e = pred[:, channel] - dataset.y[s, channel]
                err += float(np.sum(e * e))
                cnt += len(s)
            score = float(np.sqrt(err / cnt))
        except DivergenceError:
            score = np.inf
        if not np.isfinite(score):
            score = np.inf
        scores.append((float(thr), score))
        if score < best_score or best is None:
            best, best_score = model, score
    return best, scores
