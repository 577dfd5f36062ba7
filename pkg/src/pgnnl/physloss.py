"""Energy-balance residual, constraint losses and the composed training loss.

The per-step residual between consecutive states ``xp -> xc`` under the
zero-order-hold input ``u`` is::

    R = [E_kin(xc) - E_kin(xp)] + [E_pot(xc) - E_pot(xp)] - W_con + W_diss

with ``W_con = gain * u * (q_c - q_p)`` (exact under a held input) and
``W_diss`` the trapezoidal integral of the dissipative force over the
displacement.  ``R`` vanishes up to O(dt^3) on exact trajectories.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ShapeError
from .plants import GolfParams, PlantModel, ValveParams


@dataclass
class EnergyModel:
    """Energy terms of a one-degree-of-freedom plant with state ``(q, v)``.

    All callables are vectorized over numpy arrays.  ``force(q, v)`` is the
    dissipative generalized force, ``dforce(q, v)`` returns its partials
    ``(dF/dq, dF/dv)``.
    """

    plant: str
    kin: Callable
    dkin: Callable
    pot: Callable
    dpot: Callable
    input_gain: float
    force: Callable
    dforce: Callable

    def kinetic(self, x):
        x = np.asarray(x, dtype=float)
        return self.kin(x[..., 1])

    def potential(self, x):
        x = np.asarray(x, dtype=float)
        return self.pot(x[..., 0])

    def control_work(self, x_prev, x_curr, u_prev):
        x_prev, x_curr = np.asarray(x_prev, float), np.asarray(x_curr, float)
        return self.input_gain * np.asarray(u_prev, float) * (x_curr[..., 0] - x_prev[..., 0])

    def dissipation_work(self, x_prev, x_curr):
        x_prev, x_curr = np.asarray(x_prev, float), np.asarray(x_curr, float)
        fp = self.force(x_prev[..., 0], x_prev[..., 1])
        fc = self.force(x_curr[..., 0], x_curr[..., 1])
        return 0.5 * (fp + fc) * (x_curr[..., 0] - x_prev[..., 0])

    def terms(self, x_curr, x_prev, u_prev):
        """Return ``(dE_kin, dE_pot, W_con, W_diss)`` per step."""
        return (self.kinetic(x_curr) - self.kinetic(x_prev),
                self.potential(x_curr) - self.potential(x_prev),
                self.control_work(x_prev, x_curr, u_prev),
                self.dissipation_work(x_prev, x_curr))

    def residual_grad(self, x_curr, x_prev, u_prev):
        """Residual and its partials w.r.t. ``x_curr`` and ``x_prev``.

        Inputs are (n, 2) arrays and an (n,) input array.
        """
        qc, vc = x_curr[:, 0], x_curr[:, 1]
        qp, vp = x_prev[:, 0], x_prev[:, 1]
        dq = qc - qp
        fc, fp = self.force(qc, vc), self.force(qp, vp)
        fq_c, fv_c = self.dforce(qc, vc)
        fq_p, fv_p = self.dforce(qp, vp)
        gu = self.input_gain * u_prev
        favg = 0.5 * (fc + fp)
        r = (self.kin(vc) - self.kin(vp)) + (self.pot(qc) - self.pot(qp)) - gu * dq + favg * dq
        g_c = np.empty_like(x_curr)
        g_p = np.empty_like(x_prev)
        g_c[:, 0] = self.dpot(qc) - gu + favg + 0.5 * fq_c * dq
        g_c[:, 1] = self.dkin(vc) + 0.5 * fv_c * dq
        g_p[:, 0] = -self.dpot(qp) + gu - favg + 0.5 * fq_p * dq
        g_p[:, 1] = -self.dkin(vp) + 0.5 * fv_p * dq
        return r, g_c, g_p


def golf_energy_model(p: GolfParams, friction: str = "sign", eps: float = 1e-4) -> EnergyModel:
    mga = p.m * p.g * p.a
    rmu = p.r * p.mu

    if friction == "sign":
        def s(v):
            return np.sign(v)

        def ds(v):
            return np.zeros_like(v)
    else:
        def s(v):
            return np.tanh(v / eps)

        def ds(v):
            return (1.0 - np.tanh(v / eps) ** 2) / eps

    def force(q, v):
        return p.d * v + rmu * s(v) * (p.m * p.a * v * v + p.m * p.g * np.cos(q))

    def dforce(q, v):
        normal = p.m * p.a * v * v + p.m * p.g * np.cos(q)
        return (-rmu * s(v) * p.m * p.g * np.sin(q),
                p.d + rmu * (ds(v) * normal + s(v) * 2.0 * p.m * p.a * v))

    return EnergyModel(
        "golf",
        kin=lambda v: 0.5 * p.J * v * v,
        dkin=lambda v: p.J * v,
        pot=lambda q: mga * (1.0 - np.cos(q)),
        dpot=lambda q: mga * np.sin(q),
        input_gain=4.0,
        force=force,
        dforce=dforce,
    )


def valve_energy_model(p: ValveParams) -> EnergyModel:
    """Power balance of the linear valve model (dynamics multiplied by velocity)."""
    T = p.T_V
    c = 2.0 * p.D_V / T
    k = 1.0 / (T * T)
    return EnergyModel(
        "valve",
        kin=lambda v: 0.5 * v * v,
        dkin=lambda v: v,
        pot=lambda q: 0.5 * k * q * q,
        dpot=lambda q: k * q,
        input_gain=p.K_V * k,
        force=lambda q, v: c * v,
        dforce=lambda q, v: (np.zeros_like(q), np.full_like(v, c)),
    )


def energy_model_for(plant: PlantModel) -> EnergyModel:
    if plant.id == "golf":
        return golf_energy_model(plant.params, plant.spec.get("friction", "sign"), plant.spec.get("eps", 1e-4))
    if plant.id == "valve":
        return valve_energy_model(plant.params)
    raise ValueError(f"no energy model for plant {plant.id!r}")


def delta_energy(em: EnergyModel, x_curr, x_prev, u_prev, dt=None):
    """Energy-balance residual of one step (vectorized over leading axes).

    ``dt`` is accepted for interface symmetry; the work terms only need
    the displacement.
    """
    x_curr = np.asarray(x_curr, dtype=float)
    x_prev = np.asarray(x_prev, dtype=float)
    if not (np.all(np.isfinite(x_curr)) and np.all(np.isfinite(x_prev)) and np.all(np.isfinite(u_prev))):
        raise ValueError("non-finite state or input in delta_energy")
    dk, dp, wc, wd = em.terms(x_curr, x_prev, u_prev)
    r = dk + dp - wc + wd
    return float(r) if np.ndim(r) == 0 else r


class PhysicsLoss(NamedTuple):
    value: float
    residuals: np.ndarray


def physics_loss(em: EnergyModel, X_hat, U, dt=None) -> PhysicsLoss:
    """Mean squared residual over consecutive pairs of a state sequence.

    ``U[k]`` is the input held from sample k to k+1; ``len(U)`` must equal
    ``len(X_hat)`` (the last input is unused).
    """
    X_hat = np.asarray(X_hat, dtype=float)
    U = np.asarray(U, dtype=float).ravel()
    if X_hat.ndim != 2 or len(X_hat) != len(U):
        raise ShapeError(f"X_hat rows ({len(X_hat)}) and U ({len(U)}) must match")
    if len(X_hat) < 2:
        raise ValueError("physics loss needs at least two states")
    r = delta_energy(em, X_hat[1:], X_hat[:-1], U[:-1])
    return PhysicsLoss(float(np.mean(r * r)), r)


def export_residuals_csv(path, em: EnergyModel, X, U):
    """Write ``k,dE_kin,dE_pot,W_con,W_diss,residual`` per step."""
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float).ravel()
    dk, dp, wc, wd = em.terms(X[1:], X[:-1], U[:-1])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "dE_kin", "dE_pot", "W_con", "W_diss", "residual"])
        for k in range(len(dk)):
            w.writerow([k + 1] + [repr(float(v)) for v in (dk[k], dp[k], wc[k], wd[k], dk[k] + dp[k] - wc[k] + wd[k])])


@dataclass
class ConstraintSpec:
    """``h(y, u)`` evaluated per sample in physical units.

    ``dh`` (optional) returns dh/dy per sample (same shape as ``y``);
    without it a central difference is used.
    """

    h: Callable
    kind: str = "inequality"
    dh: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in ("equality", "inequality"):
            raise ValueError(f"constraint kind must be equality or inequality, got {self.kind!r}")

    def grad_h(self, Y, U, step=1e-7):
        if self.dh is not None:
            return np.asarray(self.dh(Y, U), dtype=float)
        g = np.empty_like(Y)
        for j in range(Y.shape[1]):
            e = np.zeros(Y.shape[1])
            hj = step * np.maximum(1.0, np.abs(Y[:, j]))
            e[j] = 1.0
            plus = self.h(Y + hj[:, None] * e, U)
            minus = self.h(Y - hj[:, None] * e, U)
            g[:, j] = (plus - minus) / (2 * hj)
        return g


def bound_constraint(channel: int, bound: float) -> ConstraintSpec:
    """Inequality ``|y[channel]| - bound <= 0``."""
    def h(Y, U):
        return np.abs(Y[:, channel]) - bound

    def dh(Y, U):
        g = np.zeros_like(Y)
        g[:, channel] = np.sign(Y[:, channel])
        return g

    return ConstraintSpec(h, "inequality", dh)


def constraint_loss(spec: ConstraintSpec, Y_hat, U, with_grad=False):
    """Equality: mean h^2.  Inequality: mean ReLU(h)."""
    Y_hat = np.asarray(Y_hat, dtype=float)
    h = np.asarray(spec.h(Y_hat, U), dtype=float)
    n = len(h)
    if spec.kind == "equality":
        value = float(np.mean(h * h))
        coef = 2.0 * h / n
    else:
        value = float(np.mean(np.maximum(h, 0.0)))
        coef = (h > 0).astype(float) / n
    if not with_grad:
        return value
    return value, coef[:, None] * spec.grad_h(Y_hat, U)


@dataclass
class ComposedLossConfig:
    """Weighted sum of the data-fit MSE and the physics term.

    ``target_scaler`` maps standardized predictions back to physical units
    before the energy model is evaluated.  ``energy_scale`` divides the
    residual (1.0 keeps physical units).
    """

    lambda_phy: float = 0.5
    energy: Optional[EnergyModel] = None
    constraints: List[ConstraintSpec] = field(default_factory=list)
    target_scaler: Optional[object] = None
    energy_scale: float = 1.0

    def __post_init__(self):
        lam = self.lambda_phy
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda_phy must lie in [0, 1], got {lam}")
        if not 0.0 < lam < 1.0:
            warnings.warn(f"lambda_phy={lam} at an endpoint (ablation setting)", RuntimeWarning, stacklevel=2)


def mse(Y_hat, Y) -> float:
    """Mean over samples of the squared Euclidean error."""
    diff = np.asarray(Y_hat, dtype=float) - np.asarray(Y, dtype=float)
    return float(np.sum(diff * diff) / len(diff))


class ComposedLoss(NamedTuple):
    total: float
    error_term: float
    physics_term: float
    grad: np.ndarray


def _pair_mask(n, segments):
    if segments is None:
        return np.ones(n - 1, dtype=bool)
    segments = np.asarray(segments)
    return segments[1:] == segments[:-1]


def composed_loss(cfg: ComposedLossConfig, Y_hat, Y, U, dt=None, segments=None, prev=None) -> ComposedLoss:
    """``(1 - lam) * MSE(Y_hat, Y) + lam * L_phy(Y_hat, U)`` with its gradient.

    ``Y_hat``/``Y`` are (n, l) in the network's (standardized) space; ``U[k]``
    is the physical input held from row k to row k+1, as in
    :func:`physics_loss`.  ``segments`` restricts the
    energy residual to pairs of rows inside one segment.  The physics term
    is the mean squared scaled energy residual plus every constraint loss.

    With ``prev`` (same space as ``Y_hat``) the residual is taken for each
    row between the given previous state ``prev[k]`` and ``Y_hat[k]`` under
    input ``U[k]``; ``prev`` is treated as data (no gradient flows to it).
    """
    Y_hat = np.asarray(Y_hat, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y_hat.shape != Y.shape:
        raise ShapeError(f"prediction shape {Y_hat.shape} != target shape {Y.shape}")
    n = len(Y_hat)
    if len(np.ravel(U)) != n:
        raise ShapeError(f"U has {len(np.ravel(U))} entries, expected {n}")
    diff = Y_hat - Y
    err = mse(Y_hat, Y)
    g_err = 2.0 * diff / n

    sc = cfg.target_scaler
    X = sc.invert(Y_hat) if sc is not None else Y_hat
    dX = np.broadcast_to(sc.std, Y_hat.shape) if sc is not None else np.ones_like(Y_hat)
    U = np.asarray(U, dtype=float).ravel()
    phy = 0.0
    g_phy_x = np.zeros_like(Y_hat)
    if cfg.energy is not None and prev is not None:
        Xp = sc.invert(np.asarray(prev, dtype=float)) if sc is not None else np.asarray(prev, dtype=float)
        if Xp.shape != X.shape:
            raise ShapeError(f"prev shape {Xp.shape} != prediction shape {X.shape}")
        s = cfg.energy_scale
        r, g_c, _ = cfg.energy.residual_grad(X, Xp, U)
        if s != 1.0:
            r = r / s
        phy = float(np.mean(r * r))
        g_phy_x += (2.0 * r / (n * s))[:, None] * g_c
    elif cfg.energy is not None and n >= 2:
        mask = _pair_mask(n, segments)
        k = np.flatnonzero(mask)
        if len(k):
            s = cfg.energy_scale
            r, g_c, g_p = cfg.energy.residual_grad(X[k + 1], X[k], U[k])
            if s != 1.0:
                r = r / s
            m = len(k)
            phy = float(np.mean(r * r))
            coef = (2.0 * r / (m * s))[:, None]
            np.add.at(g_phy_x, k + 1, coef * g_c)
            np.add.at(g_phy_x, k, coef * g_p)
    for c in cfg.constraints:
        v, g = constraint_loss(c, X, U, with_grad=True)
        phy += v
        g_phy_x += g
    g_phy = g_phy_x * dX

    lam = cfg.lambda_phy
    if lam == 0.0:
        return ComposedLoss(err, err, phy, g_err)
    if lam == 1.0:
        return ComposedLoss(phy, err, phy, g_phy)
    total = (1.0 - lam) * err + lam * phy
    return ComposedLoss(total, err, phy, (1.0 - lam) * g_err + lam * g_phy)
