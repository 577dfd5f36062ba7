import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import rk4_transition
from pgnnl.datakit import Excitation, build_snapshots, simulate_measurement
from pgnnl.errors import ConfigError, DivergenceError, ShapeError
from pgnnl.plants import ValveParams, valve_plant
from pgnnl.sindy import (GOLF_LIBRARY, LibrarySpec, SindyModel, build_library, fit_sindy, fit_stlsq,
                         select_threshold, sindy_rollout)


def linear_generator(n=200, seed=0):
    """y' = 0.9 y + 0.1 u driven by a random input."""
    rng = np.random.default_rng(seed)
    u = rng.uniform(-1, 1, n)
    y = np.empty(n)
    y[0] = 0.5
    for k in range(n - 1):
        y[k + 1] = 0.9 * y[k] + 0.1 * u[k]
    return y, u


class TestLibrary:
    def test_const_state_input(self):
        Y = np.array([[0.5, -1.0, 2.0]])
        U = np.array([[1.0, 2.0, 3.0]])
        Psi = build_library(LibrarySpec(("1", "y1", "u")), Y[:, :2], U[:, :2])
        np.testing.assert_array_equal(Psi, [[1.0, 0.5, 1.0], [1.0, -1.0, 2.0]])

    def test_sin_at_zero(self):
        Psi = build_library(LibrarySpec(("sin(y1)",)), np.zeros((1, 4)), np.ones((1, 4)))
        assert np.all(Psi == 0)

    def test_matches_per_sample_evaluation(self):
        rng = np.random.default_rng(0)
        Y, U = rng.normal(size=(2, 30)), rng.normal(size=(1, 30))
        spec = LibrarySpec(GOLF_LIBRARY + ("y1*y2", "y1*u", "u^2", "y1^2"))
        Psi = build_library(spec, Y, U)
        for j in range(30):
            y1, y2, u = Y[0, j], Y[1, j], U[0, j]
            ref = [1.0, y1, y2, u, np.sin(y1), np.cos(y1), y2 ** 2, np.sign(y2), y1 * y2, y1 * u, u * u, y1 ** 2]
            np.testing.assert_allclose(Psi[j], ref, rtol=1e-15)

    def test_empty_and_unknown(self):
        with pytest.raises(ConfigError):
            LibrarySpec(())
        with pytest.raises(ConfigError):
            LibrarySpec(("exp(y1)",))

    def test_needs_enough_states(self):
        with pytest.raises(ShapeError):
            build_library(LibrarySpec(("y2",)), np.zeros((1, 3)), np.zeros((1, 3)))


class TestStlsq:
    def test_zero_targets(self):
        Psi = np.random.default_rng(0).normal(size=(20, 3))
        assert np.all(fit_stlsq(Psi, np.zeros((2, 20))) == 0)

    def test_linear_recovery(self):
        y, u = linear_generator()
        Psi = build_library(LibrarySpec(("1", "y1", "u")), y[None, :-1], u[None, :-1])
        xi = fit_stlsq(Psi, y[None, 1:], threshold=0.01)
        np.testing.assert_allclose(xi[0], [0.0, 0.9, 0.1], rtol=0, atol=1e-10)
        assert xi[0, 0] == 0.0

    def test_valve_recovers_rk4_transition(self):
        p = ValveParams().with_stroke_gain()
        exc = [Excitation("step", amplitude=a, start=0.002) for a in (2.0, -5.0, 7.5)]
        exc.append(Excitation("sine", amplitude=4.0, frequency=300.0))
        d = simulate_measurement(valve_plant(p), exc, 5e-4, 120, 0.0)
        snap = build_snapshots(d)
        Psi = build_library(LibrarySpec(("y1", "y2", "u")), snap.Y, snap.U)
        xi = fit_stlsq(Psi, snap.Yp, threshold=1e-12)
        ref = rk4_transition(p, 5e-4)
        assert np.all((xi != 0) == (ref != 0))
        np.testing.assert_allclose(xi, ref, rtol=0.01)

    def test_all_thresholded_warns(self):
        y, u = linear_generator()
        Psi = build_library(LibrarySpec(("1", "y1", "u")), y[None, :-1], u[None, :-1])
        with pytest.warns(RuntimeWarning, match="thresholded to zero"):
            xi = fit_stlsq(Psi, y[None, 1:], threshold=10.0)
        assert np.all(xi == 0)

    @pytest.mark.filterwarnings("ignore:all coefficients")
    @settings(max_examples=40)
    @given(seed=st.integers(0, 10_000), thr=st.floats(0.01, 1.0))
    def test_active_set_never_grows(self, seed, thr):
        rng = np.random.default_rng(seed)
        Psi = rng.normal(size=(40, 6))
        Yp = (Psi @ (rng.normal(size=(6, 2)) * rng.integers(0, 2, size=(6, 2)))).T + 0.1 * rng.normal(size=(2, 40))
        _, hist = fit_stlsq(Psi, Yp, threshold=thr, return_history=True)
        for sets in hist:
            for a, b in zip(sets, sets[1:]):
                assert np.all(b <= a)

    @settings(max_examples=25)
    @given(seed=st.integers(0, 10_000))
    def test_normalization_leaves_predictions_unchanged(self, seed):
        rng = np.random.default_rng(seed)
        Psi = rng.normal(size=(50, 4)) * [1e-3, 1.0, 1e2, 10.0]
        Yp = (Psi @ rng.normal(size=(4, 2))).T
        a = fit_stlsq(Psi, Yp, threshold=0.0)
        b = fit_stlsq(Psi, Yp, threshold=0.0, normalize=True)
        np.testing.assert_allclose(b @ Psi.T, a @ Psi.T, rtol=1e-10, atol=1e-10 * np.max(np.abs(Yp)))

    def test_underdetermined_warns(self):
        with pytest.warns(RuntimeWarning, match="underdetermined"):
            fit_stlsq(np.ones((2, 3)), np.ones((1, 2)), threshold=0.0)


class TestRollout:
    def test_linear_generator_reproduced(self):
        y, u = linear_generator(101, seed=3)
        lib = LibrarySpec(("1", "y1", "u"))
        Psi = build_library(lib, y[None, :-1], u[None, :-1])
        model = SindyModel(fit_stlsq(Psi, y[None, 1:], 0.01), lib, 0.01, 1.0)
        pred = sindy_rollout(model, u, [y[0]], 100)
        assert np.max(np.abs(pred[:, 0] - y)) < 1e-8

    def test_identity_is_constant(self):
        model = SindyModel(np.eye(2, 3), LibrarySpec(("y1", "y2", "u")), 0.0, 1.0)
        pred = sindy_rollout(model, np.random.default_rng(0).normal(size=20), [0.3, -0.7], 20)
        assert np.all(pred == [0.3, -0.7])

    def test_zero_xi_collapses(self):
        model = SindyModel(np.zeros((2, 3)), LibrarySpec(("y1", "y2", "u")), 0.0, 1.0)
        pred = sindy_rollout(model, np.ones(5), [1.0, 2.0], 5)
        np.testing.assert_array_equal(pred[0], [1.0, 2.0])
        assert np.all(pred[1:] == 0)

    def test_divergence_names_step(self):
        model = SindyModel(np.array([[1e60]]), LibrarySpec(("y1",)), 0.0, 1.0)
        with pytest.raises(DivergenceError) as exc:
            sindy_rollout(model, np.zeros(10), [1.0], 10)
        assert exc.value.step == 2

    def test_serialization(self, tmp_path):
        model = SindyModel(np.array([[0.0, 0.9, 0.1]]), LibrarySpec(("1", "y1", "u")), 0.01, 1e-3)
        model.save(tmp_path / "s.json")
        back = SindyModel.load(tmp_path / "s.json")
        assert back.library == model.library and back.threshold == 0.01 and back.dt == 1e-3
        np.testing.assert_array_equal(back.xi, model.xi)


class TestFit:
    @pytest.mark.filterwarnings("ignore:all coefficients")
    def test_fit_and_threshold_selection(self):
        from pgnnl.datakit import split_60_20_20
        p = ValveParams().with_stroke_gain()
        exc = [Excitation("step", amplitude=a, start=0.002) for a in (2.0, -3.0, 5.0, -6.0, 4.0)]
        d = split_60_20_20(simulate_measurement(valve_plant(p), exc, 5e-4, 100, 0.0), "by_trajectory", 0)
        model, scores = select_threshold(d, ("y1", "y2", "u"), [1e-12, 1.0])
        assert model.threshold == 1e-12
        assert [s[0] for s in scores] == [1e-12, 1.0]
        np.testing.assert_allclose(model.xi, rk4_transition(p, 5e-4), rtol=0.01)
        single = fit_sindy(d, ("y1", "y2", "u"), 1e-12)
        np.testing.assert_array_equal(single.xi, model.xi)
