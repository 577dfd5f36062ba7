"""Plant models (golf robot, servo valve), degraded priors and RK4 integration.

Both plants have a two-dimensional state ``x = (position, velocity)`` and a
scalar input.  The output map is the identity unless output saturation is
configured for the valve.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DivergenceError, DomainError

PLANT_IDS = ("golf", "valve")


@dataclass(frozen=True)
class GolfParams:
    """Golf robot parameters (SI units); defaults are the identified rig values."""

    m: float = 0.5241
    a: float = 0.4702
    J: float = 0.1445
    d: float = 0.0132
    r: float = 0.0245
    mu: float = 1.5136
    g: float = 9.81

    def __post_init__(self):
        for name in ("m", "a", "J", "g"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"GolfParams.{name} must be > 0, got {v}")
        for name in ("d", "r", "mu"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"GolfParams.{name} must be >= 0, got {v}")


@dataclass(frozen=True)
class ValveLimits:
    v_max: float
    a_max: float

    def __post_init__(self):
        if not (self.v_max > 0 and self.a_max > 0):
            raise ConfigError(f"valve limits must be positive, got {self}")


@dataclass(frozen=True)
class ValveParams:
    """Servo valve second-order lag.

    ``K_V`` multiplies the input voltage directly in the dynamics.  The
    table value 0.1 is a per-volt fraction of full stroke; use
    :meth:`with_stroke_gain` to express it in metres per volt.
    ``p_S`` (supply pressure, Pa) is kept for completeness only.
    """

    f_V: float = 350.0
    D_V: float = 0.5
    K_V: float = 0.1
    u_range: tuple = (-10.0, 10.0)
    y_max: float = 4.2672e-4
    p_S: float = 280e5
    limits: Optional[ValveLimits] = None
    limit_mode: str = "ode"

    def __post_init__(self):
        if not (self.f_V > 0 and self.D_V > 0 and self.y_max > 0):
            raise ConfigError(f"invalid valve parameters: {self}")
        lo, hi = self.u_range
        if not lo < hi:
            raise ConfigError(f"u_range must be a nonempty interval, got {self.u_range}")
        if self.limit_mode not in ("ode", "output"):
            raise ConfigError(f"limit_mode must be 'ode' or 'output', got {self.limit_mode!r}")
        if isinstance(self.limits, dict):
            object.__setattr__(self, "limits", ValveLimits(**self.limits))
        object.__setattr__(self, "u_range", (float(lo), float(hi)))

    @property
    def T_V(self) -> float:
        return 1.0 / (2.0 * math.pi * self.f_V)

    def with_stroke_gain(self) -> "ValveParams":
        """Return a copy whose gain is in m/V (``K_V * y_max``)."""
        return replace(self, K_V=self.K_V * self.y_max)

    def default_limits(self) -> ValveLimits:
        """Placeholder limit magnitudes scaled from stroke and bandwidth."""
        w = 2.0 * math.pi * self.f_V
        v_max = 2.0 * self.y_max * w * 0.05
        return ValveLimits(v_max=v_max, a_max=v_max * w * 0.5)


def _check_finite(x, u):
    if not (math.isfinite(x[0]) and math.isfinite(x[1]) and math.isfinite(u)):
        raise DomainError(f"non-finite input: x={x!r}, u={u!r}")


def _sign(v: float) -> float:
    return 1.0 if v > 0 else (-1.0 if v < 0 else 0.0)


def golf_friction(x1, x2, p: GolfParams, friction="sign", eps=1e-4):
    """Friction torque F_G (works on floats and numpy arrays)."""
    if friction == "sign":
        s = np.sign(x2)
    elif friction == "tanh":
        s = np.tanh(x2 / eps)
    else:
        raise ConfigError(f"unknown friction mode {friction!r}")
    return p.d * x2 + p.r * p.mu * s * (p.m * x2 * x2 * p.a + p.m * p.g * np.cos(x1))


def golf_dynamics(x, u, p: GolfParams, friction: str = "sign", eps: float = 1e-4) -> np.ndarray:
    x1, x2 = float(x[0]), float(x[1])
    u = float(u)
    _check_finite((x1, x2), u)
    if friction == "sign":
        s = _sign(x2)
    elif friction == "tanh":
        s = math.tanh(x2 / eps)
    else:
        raise ConfigError(f"unknown friction mode {friction!r}")
    F = p.d * x2 + p.r * p.mu * s * (p.m * x2 * x2 * p.a + p.m * p.g * math.cos(x1))
    return np.array([x2, (-p.m * p.g * p.a * math.sin(x1) - F + 4.0 * u) / p.J])


def _clip(v, lim):
    return lim if v > lim else (-lim if v < -lim else v)


def valve_dynamics(x, u, p: ValveParams) -> np.ndarray:
    x1, x2 = float(x[0]), float(x[1])
    u = float(u)
    _check_finite((x1, x2), u)
    T = p.T_V
    lim = p.limits if p.limit_mode == "ode" else None
    if lim is not None:
        x1 = _clip(x1, p.y_max)
        x2 = _clip(x2, lim.v_max)
    acc = -(2.0 * p.D_V / T) * x2 - x1 / (T * T) + (p.K_V / (T * T)) * u
    dx1 = x2
    if lim is not None:
        acc = _clip(acc, lim.a_max)
        # hard stops: no motion further into a saturated bound
        if (x2 >= lim.v_max and acc > 0) or (x2 <= -lim.v_max and acc < 0):
            acc = 0.0
        if (x1 >= p.y_max and dx1 > 0) or (x1 <= -p.y_max and dx1 < 0):
            dx1 = 0.0
    return np.array([dx1, acc])


def _valve_project(p: ValveParams):
    lim = p.limits

    def project(x):
        x1, x2 = float(x[0]), _clip(float(x[1]), lim.v_max)
        if x1 >= p.y_max:
            x1, x2 = p.y_max, min(x2, 0.0)
        elif x1 <= -p.y_max:
            x1, x2 = -p.y_max, max(x2, 0.0)
        return np.array([x1, x2])

    return project


def _valve_output(p: ValveParams):
    lim = p.limits

    def output(x):
        return np.array([_clip(float(x[0]), p.y_max), _clip(float(x[1]), lim.v_max)])

    return output


@dataclass
class PlantModel:
    """Continuous plant ``x' = rhs(x, u, t)`` with identity (or saturating) output.

    ``project`` (optional) is applied to the state after every integration
    step, ``output`` (optional) to every emitted sample.  ``spec`` is a
    JSON-able description that :func:`build_plant` turns back into a model.
    """

    id: str
    rhs: Callable
    state_dim: int
    labels: tuple
    params: object
    spec: dict
    project: Optional[Callable] = None
    output: Optional[Callable] = None

    def __call__(self, x, u, t=0.0):
        return self.rhs(x, u, t)


def golf_plant(p: Optional[GolfParams] = None, friction: str = "sign", eps: float = 1e-4) -> PlantModel:
    p = p or GolfParams()
    if friction not in ("sign", "tanh"):
        raise ConfigError(f"unknown friction mode {friction!r}")

    def rhs(x, u, t=0.0):
        return golf_dynamics(x, u, p, friction, eps)

    spec = {"plant": "golf", "params": asdict(p), "friction": friction, "eps": eps}
    return PlantModel("golf", rhs, 2, ("phi [rad]", "phi_dot [rad/s]"), p, spec)


def valve_plant(p: Optional[ValveParams] = None) -> PlantModel:
    p = p or ValveParams()

    def rhs(x, u, t=0.0):
        return valve_dynamics(x, u, p)

    d = asdict(p)
    d["u_range"] = list(p.u_range)
    spec = {"plant": "valve", "params": d}
    project = output = None
    if p.limits is not None:
        if p.limit_mode == "ode":
            project = _valve_project(p)
        else:
            output = _valve_output(p)
    return PlantModel("valve", rhs, 2, ("y_V [m]", "y_V_dot [m/s]"), p, spec, project, output)


def build_plant(spec: dict) -> PlantModel:
    """Rebuild a :class:`PlantModel` from its ``spec`` dictionary."""
    spec = dict(spec)
    kind = spec.pop("plant", None)
    params = dict(spec.pop("params", {}))
    if kind == "golf":
        return golf_plant(GolfParams(**params), spec.get("friction", "sign"), spec.get("eps", 1e-4))
    if kind == "valve":
        if params.get("u_range") is not None:
            params["u_range"] = tuple(params["u_range"])
        return valve_plant(ValveParams(**params))
    raise ConfigError(f"unknown plant id {kind!r}")


def true_plant(plant_id: str, params=None, **kw) -> PlantModel:
    if plant_id == "golf":
        return golf_plant(params, **kw)
    if plant_id == "valve":
        return valve_plant(params)
    raise ConfigError(f"unknown plant id {plant_id!r}")


_GOLF_DROP = {
    "friction": {"d": 0.0, "mu": 0.0},
    "coulomb": {"mu": 0.0},
    "damping": {"d": 0.0},
}


def make_prior(plant_id: str, degradation_spec: Optional[dict] = None, base=None) -> PlantModel:
    """Degraded copy of a true plant.

    ``degradation_spec`` keys:

    * any parameter name -> absolute override (e.g. ``{"mu": 0}``)
    * ``"scale"`` -> ``{param: factor}`` multiplicative changes
    * ``"drop"`` -> list of terms to remove (golf: friction, coulomb,
      damping; valve: limits)
    * ``"limits"`` (valve) -> ``None``/``"none"`` to omit saturation or a
      ``{"v_max", "a_max"}`` mapping
    * ``"friction"``/``"eps"`` (golf) -> friction regularization mode

    ``base`` is the true plant's parameter object (defaults for the plant id
    if omitted) or an existing golf :class:`PlantModel`.
    """
    spec = copy.deepcopy(degradation_spec or {})
    friction, eps = "sign", 1e-4
    if isinstance(base, PlantModel):
        friction, eps = base.spec.get("friction", "sign"), base.spec.get("eps", 1e-4)
        base = base.params
    if plant_id == "golf":
        p = base or GolfParams()
        friction = spec.pop("friction", friction)
        eps = spec.pop("eps", eps)
    elif plant_id == "valve":
        p = base or ValveParams()
    else:
        raise ConfigError(f"unknown plant id {plant_id!r}")

    names = {f.name for f in fields(p)}
    changes = {}
    for term in spec.pop("drop", []):
        if plant_id == "golf" and term in _GOLF_DROP:
            changes.update(_GOLF_DROP[term])
        elif plant_id == "valve" and term == "limits":
            changes["limits"] = None
        else:
            raise ConfigError(f"unknown term {term!r} for plant {plant_id!r}")
    for name, factor in spec.pop("scale", {}).items():
        if name not in names or name in ("limits", "u_range", "limit_mode"):
            raise ConfigError(f"cannot scale {name!r} on plant {plant_id!r}")
        changes[name] = getattr(p, name) * factor
    for name, value in spec.items():
        if name not in names:
            raise ConfigError(f"unknown parameter or term {name!r} for plant {plant_id!r}")
        if name == "limits" and (value is None or value == "none"):
            value = None
        changes[name] = value

    p = replace(p, **changes)
    if plant_id == "golf":
        return golf_plant(p, friction, eps)
    return valve_plant(p)


@dataclass
class Trajectory:
    """Uniformly sampled trajectory (rows of ``x`` are time samples)."""

    t: np.ndarray
    u: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        if not (len(self.t) == len(self.u) == len(self.x)):
            raise ValueError("t, u and x must have equal lengths")
        if len(self.t) > 1:
            dts = np.diff(self.t)
            if not dts[0] > 0 or np.max(np.abs(dts - dts[0])) > 1e-9 * dts[0] + 1e-12 * abs(self.t[-1]):
                raise ValueError("time grid must be uniform with dt > 0")

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def to_csv(self, path):
        header = ["t", "u"] + [f"x{i + 1}" for i in range(self.x.shape[1])]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t, u, x in zip(self.t, self.u, self.x):
                w.writerow([repr(float(t)), repr(float(u))] + [repr(float(v)) for v in x])

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1], data[:, 2:])


InputSignal = Union[Callable[[float], float], Sequence[float], np.ndarray]


def _input_samples(u_of_t: InputSignal, dt: float, n_steps: int) -> np.ndarray:
    if callable(u_of_t):
        return np.array([float(u_of_t(k * dt)) for k in range(n_steps + 1)])
    u = np.asarray(u_of_t, dtype=float).ravel()
    if len(u) < n_steps:
        raise ValueError(f"input has {len(u)} samples, need at least {n_steps}")
    if len(u) == n_steps:
        u = np.append(u, u[-1] if n_steps else 0.0)
    return u[: n_steps + 1].copy()


def integrate(model: PlantModel, x0, u_of_t: InputSignal, dt: float, n_steps: int,
              method: str = "rk4") -> Trajectory:
    """Fixed-step integration with zero-order-hold input.

    ``u_of_t`` is either a function of time or an array of samples; sample
    ``u[k]`` is held over ``[t_k, t_k + dt)``.  Returns ``n_steps + 1``
    samples.
    """
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    if method not in ("rk4", "euler"):
        raise ConfigError(f"unknown integration method {method!r}")
    u = _input_samples(u_of_t, dt, n_steps)
    f = model.rhs
    xs = np.empty((n_steps + 1, model.state_dim))
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (model.state_dim,):
        raise ValueError(f"x0 must have length {model.state_dim}")
    if model.project is not None:
        x = model.project(x)
    xs[0] = x
    h = dt
    for k in range(n_steps):
        t = k * h
        uk = u[k]
        try:
            if method == "rk4":
                k1 = f(x, uk, t)
                k2 = f(x + 0.5 * h * k1, uk, t + 0.5 * h)
                k3 = f(x + 0.5 * h * k2, uk, t + 0.5 * h)
                k4 = f(x + h * k3, uk, t + h)
                x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            else:
                x = x + h * f(x, uk, t)
        except DomainError as exc:
            raise DivergenceError(f"non-finite state during integration at step {k + 1}", step=k + 1) from exc
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite state during integration at step {k + 1}", step=k + 1)
        if model.project is not None:
            x = model.project(x)
        xs[k + 1] = x
    if model.output is not None:
        xs = np.array([model.output(row) for row in xs])
    return Trajectory(np.arange(n_steps + 1) * dt, u, xs)


def rk4_step(model: PlantModel, x, u: float, dt: float, t: float = 0.0) -> np.ndarray:
    """One projected RK4 step (state only, no output map)."""
    f = model.rhs
    k1 = f(x, u, t)
    k2 = f(x + 0.5 * dt * k1, u, t + 0.5 * dt)
    k3 = f(x + 0.5 * dt * k2, u, t + 0.5 * dt)
    k4 = f(x + dt * k3, u, t + dt)
    x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if model.project is not None:
        x = model.project(x)
    return x
