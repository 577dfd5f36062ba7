import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import GOLF_RHS_PI2_1, VALVE_K_OVER_T2, oscillator, rk4_orders
from pgnnl.errors import ConfigError, DivergenceError, DomainError
from pgnnl.plants import (GolfParams, PlantModel, Trajectory, ValveLimits, ValveParams, build_plant,
                          golf_dynamics, golf_plant, integrate, make_prior, rk4_step, valve_dynamics,
                          valve_plant)

finite = st.floats(-5, 5, allow_nan=False)


def limited_valve(mode="ode"):
    p = ValveParams().with_stroke_gain()
    return replace(p, limits=p.default_limits(), limit_mode=mode)


class TestGolf:
    def test_equilibrium_is_exact(self):
        np.testing.assert_array_equal(golf_dynamics(np.zeros(2), 0.0, GolfParams()), [0.0, 0.0])

    def test_unit_input_from_rest(self):
        f = golf_dynamics(np.zeros(2), 1.0, GolfParams())
        assert f[0] == 0.0
        assert f[1] == pytest.approx(4.0 / 0.1445, rel=1e-15)
        assert f[1] == pytest.approx(27.681660899653979, rel=1e-14)

    def test_pinned_value_at_quarter_turn(self):
        f = golf_dynamics(np.array([math.pi / 2, 1.0]), 0.0, GolfParams())
        assert f[0] == 1.0
        assert f[1] == pytest.approx(GOLF_RHS_PI2_1, rel=1e-13)

    def test_tanh_friction_is_smooth_at_rest(self):
        f = golf_plant(friction="tanh").rhs(np.array([0.0, 0.0]), 0.0)
        np.testing.assert_array_equal(f, [0.0, 0.0])

    @pytest.mark.parametrize("bad", [math.nan, math.inf])
    def test_non_finite_input_rejected(self, bad):
        with pytest.raises(DomainError):
            golf_dynamics(np.array([bad, 0.0]), 0.0, GolfParams())
        with pytest.raises(DomainError):
            golf_dynamics(np.zeros(2), bad, GolfParams())

    @pytest.mark.parametrize("field,value", [("m", 0.0), ("J", -1.0), ("mu", -0.1), ("d", math.nan)])
    def test_parameter_validation(self, field, value):
        with pytest.raises(ConfigError):
            GolfParams(**{field: value})


class TestValve:
    def test_gain_over_t_squared(self):
        f = valve_dynamics(np.zeros(2), 1.0, ValveParams())
        assert f[0] == 0.0
        assert f[1] == pytest.approx(VALVE_K_OVER_T2, rel=1e-13)

    def test_time_constant(self):
        assert ValveParams().T_V == pytest.approx(1.0 / (2 * math.pi * 350.0), rel=1e-15)

    @given(u=finite)
    def test_steady_state(self, u):
        p = ValveParams()
        f = valve_dynamics(np.array([p.K_V * u, 0.0]), u, p)
        assert abs(f[0]) == 0.0
        assert abs(f[1]) <= 1e-9 * VALVE_K_OVER_T2 * max(1.0, abs(u))

    def test_velocity_clamped(self):
        p = limited_valve()
        f = valve_dynamics(np.array([0.0, 10 * p.limits.v_max]), 3.0, p)
        assert f[0] == p.limits.v_max
        assert abs(f[1]) <= p.limits.a_max

    @settings(max_examples=200)
    @given(x1=st.floats(-1e-3, 1e-3), x2=st.floats(-1, 1), u=finite, alpha=st.floats(-10, 10))
    def test_linearity_without_limits(self, x1, x2, u, alpha):
        p = ValveParams().with_stroke_gain()
        x = np.array([x1, x2])
        lhs = valve_dynamics(alpha * x, alpha * u, p)
        rhs = alpha * valve_dynamics(x, u, p)
        scale = np.max(np.abs(rhs)) + np.max(np.abs(lhs)) + 1e-300
        assert np.max(np.abs(lhs - rhs)) <= 1e-12 * scale

    @pytest.mark.parametrize("mode", ["ode", "output"])
    @pytest.mark.parametrize("amp", [5.0, -9.0, 10.0])
    def test_limited_trajectories_stay_in_bounds(self, mode, amp):
        p = limited_valve(mode)
        tr = integrate(valve_plant(p), [0.0, 0.0], lambda t: amp if t >= 0.01 else 0.0, 5e-4, 400)
        assert np.all(np.abs(tr.x[:, 0]) <= p.y_max)
        assert np.all(np.abs(tr.x[:, 1]) <= p.limits.v_max)

    def test_unlimited_prior_exceeds_velocity_bound(self):
        p = limited_valve()
        free = make_prior("valve", {"limits": None}, base=p)
        tr = integrate(free, [0.0, 0.0], lambda t: 5.0, 5e-4, 200)
        assert np.max(np.abs(tr.x[:, 1])) > p.limits.v_max

    def test_parameter_validation(self):
        with pytest.raises(ConfigError):
            ValveParams(f_V=0.0)
        with pytest.raises(ConfigError):
            ValveParams(u_range=(1.0, 1.0))
        with pytest.raises(ConfigError):
            ValveLimits(0.0, 1.0)
        with pytest.raises(ConfigError):
            ValveParams(limit_mode="clip")

    def test_default_limit_magnitudes(self):
        p = ValveParams()
        lim = p.default_limits()
        w = 2 * math.pi * p.f_V
        assert lim.v_max == pytest.approx(2 * p.y_max * w * 0.05)


class TestIntegrate:
    def test_zero_rhs_is_constant(self):
        zero = PlantModel("zero", lambda x, u, t=0.0: np.zeros(2), 2, ("a", "b"), None, {})
        tr = integrate(zero, [0.3, -1.2], np.ones(11), 0.1, 10)
        assert tr.x.shape == (11, 2)
        assert np.all(tr.x == [0.3, -1.2])

    def test_oscillator_error_scales_with_dt4(self):
        for n in (32, 64, 128):
            dt = 2 * math.pi / n
            tr = integrate(oscillator(), [1.0, 0.0], np.zeros(n + 1), dt, n)
            err = np.max(np.abs(tr.x[:, 0] - np.cos(tr.t)))
            assert err <= 0.05 * dt ** 4

    def test_convergence_order(self):
        assert min(rk4_orders(levels=4)) >= 3.9

    def test_euler_is_first_order(self):
        errs = []
        for n in (400, 800):
            tr = integrate(oscillator(), [1.0, 0.0], np.zeros(n + 1), 2 * math.pi / n, n, method="euler")
            errs.append(np.linalg.norm(tr.x[-1] - [1.0, 0.0]))
        assert 0.8 < math.log2(errs[0] / errs[1]) < 1.2

    def test_zero_order_hold(self):
        # x' = u: the held sample is integrated exactly
        ramp = PlantModel("int", lambda x, u, t=0.0: np.array([u, 0.0]), 2, ("a", "b"), None, {})
        u = np.array([1.0, 2.0, -1.0, 0.5])
        tr = integrate(ramp, [0.0, 0.0], u, 0.5, 3)
        np.testing.assert_allclose(tr.x[:, 0], [0.0, 0.5, 1.5, 1.0], atol=1e-15)
        np.testing.assert_array_equal(tr.u, u)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_names_step(self):
        blow = PlantModel("blow", lambda x, u, t=0.0: np.array([x[0] ** 2, 0.0]), 2, ("a", "b"), None, {})
        with pytest.raises(DivergenceError) as exc:
            integrate(blow, [1.0, 0.0], np.zeros(101), 1.0, 100)
        assert exc.value.step >= 1
        assert f"step {exc.value.step}" in str(exc.value)

    def test_rk4_step_matches_integrate(self):
        p = golf_plant()
        tr = integrate(p, [0.2, 0.1], [0.3, 0.3], 1e-3, 1)
        np.testing.assert_array_equal(rk4_step(p, np.array([0.2, 0.1]), 0.3, 1e-3), tr.x[1])

    def test_bad_dt(self):
        with pytest.raises(ValueError):
            integrate(golf_plant(), [0, 0], [0.0], 0.0, 1)


class TestPrior:
    def test_empty_spec_is_identity(self):
        rng = np.random.default_rng(0)
        for pid, true in (("golf", golf_plant()), ("valve", valve_plant())):
            prior = make_prior(pid, {})
            for _ in range(100):
                x = rng.normal(size=2) * ([1.0, 2.0] if pid == "golf" else [1e-4, 0.1])
                u = float(rng.uniform(-5, 5))
                np.testing.assert_array_equal(prior.rhs(x, u), true.rhs(x, u))

    def test_friction_removed(self):
        prior = make_prior("golf", {"mu": 0})
        assert prior.params.mu == 0.0
        assert prior.params.d == GolfParams().d
        dropped = make_prior("golf", {"drop": ["friction"]})
        assert dropped.params.mu == 0.0 and dropped.params.d == 0.0

    def test_scaling(self):
        prior = make_prior("golf", {"scale": {"mu": 0.5, "d": 0.5}})
        assert prior.params.mu == pytest.approx(0.5 * 1.5136)
        assert prior.params.d == pytest.approx(0.5 * 0.0132)

    def test_valve_limits_dropped(self):
        base = limited_valve()
        prior = make_prior("valve", {"limits": "none"}, base=base)
        assert prior.params.limits is None and prior.project is None
        assert make_prior("valve", {"drop": ["limits"]}, base=base).params.limits is None

    def test_pure_function(self):
        base = GolfParams()
        spec = {"scale": {"mu": 0.5}}
        make_prior("golf", spec, base=base)
        assert spec == {"scale": {"mu": 0.5}}
        assert base == GolfParams()

    @pytest.mark.parametrize("pid,spec", [("golf", {"drop": ["magic"]}), ("golf", {"zeta": 1.0}),
                                          ("valve", {"drop": ["friction"]}), ("rocket", {})])
    def test_unknown_names(self, pid, spec):
        with pytest.raises(ConfigError):
            make_prior(pid, spec)

    def test_spec_round_trip(self):
        for pl in (golf_plant(make_prior("golf", {"mu": 0.1}).params, friction="tanh"), valve_plant(limited_valve())):
            again = build_plant(pl.spec)
            x = np.array([0.1, 0.2]) if pl.id == "golf" else np.array([1e-4, 0.05])
            np.testing.assert_array_equal(again.rhs(x, 0.7), pl.rhs(x, 0.7))


class TestTrajectory:
    def test_csv_round_trip(self, tmp_path):
        tr = integrate(golf_plant(), [0.1, 0.0], lambda t: math.sin(7 * t), 1e-3, 50)
        path = tmp_path / "tr.csv"
        tr.to_csv(path)
        assert path.read_text().splitlines()[0] == "t,u,x1,x2"
        back = Trajectory.from_csv(path)
        np.testing.assert_array_equal(back.x, tr.x)
        np.testing.assert_array_equal(back.u, tr.u)
        np.testing.assert_array_equal(back.t, tr.t)

    def test_rejects_non_uniform_grid(self):
        with pytest.raises(ValueError):
            Trajectory([0.0, 0.1, 0.3], [0, 0, 0], np.zeros((3, 2)))

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError):
            Trajectory([0.0, 0.1], [0, 0, 0], np.zeros((3, 2)))
