import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pgnnl.datakit import (Dataset, Excitation, Standardizer, build_snapshots, fit_standardizer, generate_signal,
                           pair_indices, simulate_measurement, split_60_20_20, split_segments, transient_window)
from pgnnl.errors import ConfigError, SplitError
from pgnnl.plants import golf_plant, integrate


def toy_dataset(lengths, dt=0.1, seed=0):
    rng = np.random.default_rng(seed)
    t = np.concatenate([np.arange(n) * dt for n in lengths])
    tid = np.concatenate([np.full(n, i) for i, n in enumerate(lengths)])
    n = len(t)
    return Dataset(t, rng.normal(size=n), rng.normal(size=(n, 2)), tid, dt)


class TestSignals:
    def test_step_at_one_second(self):
        u = generate_signal(Excitation("step", amplitude=5.0, start=1.0), 5e-4, 4000)
        t = np.arange(4001) * 5e-4
        assert np.all(u[t < 1.0 - 1e-12] == 0.0)
        assert np.all(u[t >= 1.0 - 1e-12] == 5.0)
        assert u[2000] == 5.0 and u[1999] == 0.0

    def test_zero_amplitude_sine(self):
        assert np.all(generate_signal(Excitation("sine", amplitude=0.0, frequency=3.0), 1e-3, 500) == 0.0)

    def test_degenerate_chirp_equals_sine(self):
        for f in (0.5, 2.0, 7.3):
            c = generate_signal(Excitation("chirp", amplitude=0.3, f0=f, f1=f), 1e-3, 3000)
            s = generate_signal(Excitation("sine", amplitude=0.3, frequency=f), 1e-3, 3000)
            np.testing.assert_allclose(c, s, rtol=0, atol=1e-14)

    def test_chirp_matches_linear_sweep_phase(self):
        dt, n, f0, f1 = 1e-3, 10000, 1.0, 5.0
        u = generate_signal(Excitation("chirp", amplitude=1.0, f0=f0, f1=f1), dt, n)
        t = np.arange(n + 1) * dt
        T = n * dt
        ref = np.sin(2 * np.pi * (f0 * t + 0.5 * (f1 - f0) / T * t ** 2))
        np.testing.assert_allclose(u, ref, atol=1e-9)

    def test_offset_applies_after_start(self):
        u = generate_signal(Excitation("sine", amplitude=0.0, offset=2.0, start=0.05), 0.01, 10)
        np.testing.assert_array_equal(u, [0, 0, 0, 0, 0, 2, 2, 2, 2, 2, 2])

    @pytest.mark.parametrize("kw", [{"kind": "ramp"}, {"kind": "chirp", "f0": 2.0, "f1": 1.0},
                                    {"kind": "sine", "amplitude": math.inf}, {"kind": "chirp", "f0": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            Excitation(**kw)


class TestMeasurement:
    def test_noise_free_equals_clean_trajectory(self):
        p = golf_plant()
        e = Excitation("sine", amplitude=0.3, frequency=1.0)
        d = simulate_measurement(p, e, 1e-3, 300, 0.0, seed=1)
        tr = integrate(p, [0, 0], generate_signal(e, 1e-3, 300), 1e-3, 300)
        np.testing.assert_array_equal(d.y, tr.x)
        np.testing.assert_array_equal(d.u, tr.u)

    def test_seed_determinism(self):
        p = golf_plant()
        e = [Excitation("step", amplitude=0.2), Excitation("sine", amplitude=0.1, frequency=2.0)]
        a = simulate_measurement(p, e, 1e-3, 200, [1e-3, 1e-2], seed=7)
        b = simulate_measurement(p, e, 1e-3, 200, [1e-3, 1e-2], seed=7)
        c = simulate_measurement(p, e, 1e-3, 200, [1e-3, 1e-2], seed=8)
        assert a.y.tobytes() == b.y.tobytes()
        assert a.y.tobytes() != c.y.tobytes()

    def test_noise_std_law_of_large_numbers(self):
        p = golf_plant()
        clean = simulate_measurement(p, Excitation("sine", amplitude=0.0), 1e-3, 99999, 0.0)
        noisy = simulate_measurement(p, Excitation("sine", amplitude=0.0), 1e-3, 99999, (1e-3, 1e-2), seed=3)
        std = np.std(noisy.y - clean.y, axis=0)
        assert len(noisy) == 100000
        np.testing.assert_allclose(std, [1e-3, 1e-2], rtol=0.05)

    def test_auto_noise_is_one_percent_of_peak(self):
        from pgnnl.plants import valve_plant
        d = simulate_measurement(valve_plant(), Excitation("step", amplitude=5.0), 5e-4, 100, "auto", seed=0)
        clean = simulate_measurement(valve_plant(), Excitation("step", amplitude=5.0), 5e-4, 100, 0.0)
        np.testing.assert_allclose(d.meta["noise_std"], 0.01 * np.max(np.abs(clean.y), axis=0))

    def test_negative_noise_rejected(self):
        with pytest.raises(ConfigError):
            simulate_measurement(golf_plant(), Excitation("step"), 1e-3, 10, -1.0)


class TestSplit:
    def test_contiguous_counts(self):
        d = split_60_20_20(toy_dataset([10]))
        assert list(d.split) == ["train"] * 6 + ["val"] * 2 + ["test"] * 2

    def test_by_trajectory_pinned_assignment(self):
        d = split_60_20_20(toy_dataset([5] * 6), "by_trajectory", seed=0)
        tags = [d.split[d.traj_id == i][0] for i in range(6)]
        assert tags == ["val", "test", "train", "train", "train", "train"]
        assert (tags.count("train"), tags.count("val"), tags.count("test")) == (4, 1, 1)
        again = split_60_20_20(toy_dataset([5] * 6), "by_trajectory", seed=0)
        assert list(again.split) == list(d.split)

    @given(n=st.integers(5, 400))
    def test_tags_partition_and_proportions(self, n):
        d = split_60_20_20(toy_dataset([n]))
        tags = list(d.split)
        assert len(tags) == n and set(tags) <= {"train", "val", "test"}
        for name, frac in (("train", 0.6), ("val", 0.2), ("test", 0.2)):
            assert abs(tags.count(name) - frac * n) <= 1.0

    def test_too_small(self):
        with pytest.raises(SplitError):
            split_60_20_20(toy_dataset([4]))

    def test_input_not_mutated(self):
        d = toy_dataset([20])
        split_60_20_20(d)
        assert set(d.split) == {""}


class TestStandardizer:
    def test_mean_three_std_two(self):
        d = Dataset(np.arange(5.0), np.zeros(5), np.c_[[1.0, 5.0, 1.0, 5.0, 99.0]], np.zeros(5), 1.0,
                    np.array(["train"] * 4 + ["test"], dtype=object))
        s = fit_standardizer(d)
        assert s.mean[0] == 3.0 and s.std[0] == 2.0
        assert s.apply([[5.0]])[0, 0] == 1.0

    @settings(max_examples=50)
    @given(seed=st.integers(0, 10_000))
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        v = rng.normal(size=(50, 3)) * rng.uniform(1e-3, 1e3, size=3) + rng.normal(size=3) * 10
        s = Standardizer.fit(v)
        back = s.invert(s.apply(v))
        assert np.max(np.abs(back - v) / np.maximum(np.abs(v), 1e-300)) < 1e-12

    @settings(max_examples=30)
    @given(shift=st.floats(-1e3, 1e3), seed=st.integers(0, 1000))
    def test_no_leakage_from_val_or_test(self, shift, seed):
        d = split_60_20_20(toy_dataset([30, 20], seed=seed))
        before = fit_standardizer(d)
        d2 = d.copy()
        m = d2.split != "train"
        d2.y[m] += shift
        d2.u[m] -= shift
        assert fit_standardizer(d2) == before
        assert fit_standardizer(d2, "u") == fit_standardizer(d, "u")

    def test_constant_channel_warns(self):
        with pytest.warns(RuntimeWarning, match="constant"):
            s = Standardizer.fit(np.c_[np.ones(10), np.arange(10.0)])
        assert s.std[0] == 1.0

    def test_requires_train_records(self):
        with pytest.raises(SplitError):
            fit_standardizer(toy_dataset([10]))


class TestSnapshots:
    def test_three_samples(self):
        d = toy_dataset([3])
        s = build_snapshots(d)
        assert s.Y.shape == s.Yp.shape == (2, 2) and s.U.shape == (1, 2)
        np.testing.assert_array_equal(s.Yp[:, 0], d.y[1])
        np.testing.assert_array_equal(s.Yp[:, 1], d.y[2])

    def test_boundary_pairs_dropped(self):
        d = toy_dataset([5, 4])
        s = build_snapshots(d)
        assert s.Y.shape[1] == 7
        k = pair_indices(d)
        assert 4 not in k
        np.testing.assert_array_equal(s.Yp, d.y[k + 1].T)
        np.testing.assert_array_equal(s.U[0], d.u[k])

    @given(lengths=st.lists(st.integers(1, 12), min_size=1, max_size=6))
    def test_successor_property(self, lengths):
        d = toy_dataset(lengths)
        if all(n < 2 for n in lengths):
            with pytest.raises(ValueError):
                build_snapshots(d)
            return
        s = build_snapshots(d)
        assert s.Y.shape[1] == sum(n - 1 for n in lengths)
        for j, k in enumerate(pair_indices(d)):
            assert d.traj_id[k] == d.traj_id[k + 1]
            np.testing.assert_array_equal(s.Y[:, j], d.y[k])
            np.testing.assert_array_equal(s.Yp[:, j], d.y[k + 1])

    def test_empty(self):
        with pytest.raises(ValueError):
            build_snapshots(toy_dataset([0]))

    def test_mixed_dt_rejected(self):
        d = toy_dataset([5])
        d.t[3:] += 0.05
        with pytest.raises(ValueError):
            build_snapshots(d)

    def test_concatenate_rejects_mixed_dt(self):
        with pytest.raises(ValueError):
            Dataset.concatenate([toy_dataset([5], dt=0.1), toy_dataset([5], dt=0.2)])


class TestPersistence:
    def test_csv_round_trip(self, tmp_path):
        d = split_60_20_20(simulate_measurement(golf_plant(), Excitation("step", amplitude=0.2), 1e-3, 50,
                                                [1e-4, 1e-3], seed=4))
        d.standardizer["y"] = fit_standardizer(d)
        path = tmp_path / "d.csv"
        d.to_csv(path)
        head = path.read_text().splitlines()[0]
        assert head == "t,u,y1,y2,split,traj_id"
        back = Dataset.from_csv(path)
        for f in ("t", "u", "y", "traj_id"):
            np.testing.assert_array_equal(getattr(back, f), getattr(d, f))
        assert list(back.split) == list(d.split)
        assert back.dt == d.dt and back.meta["seed"] == 4
        assert back.standardizer["y"] == d.standardizer["y"]


class TestWindows:
    def test_transient_window_keeps_prefix(self):
        d = toy_dataset([100, 40])
        w = transient_window(d, 0.15)
        assert [len(i) for _, i in w.trajectory_slices()] == [15, 6]
        np.testing.assert_array_equal(w.y[:15], d.y[:15])

    def test_full_fraction_is_identity(self):
        d = toy_dataset([30, 7])
        w = transient_window(d, 1.0)
        np.testing.assert_array_equal(w.y, d.y)

    def test_segments(self):
        d = split_60_20_20(toy_dataset([10, 10]))
        segs = split_segments(d, "val")
        assert [list(s) for s in segs] == [[6, 7], [16, 17]]
