import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microcsi.errors import ConfigError
from microcsi.evaluation import (
    ScoreSet,
    SimulationSettings,
    adr_at_far,
    balanced_probes,
    candidate_thresholds,
    evaluate_grid,
    operating_point,
    records_to_arrays,
    roc_auc,
    roc_curve,
    run_rotation,
    simulate_device_array,
    simulate_fingerprints,
    simulate_room_records,
    device_profiles,
    stability_report,
    summarize,
)
from oracles import crandn, sweep_best_operating_point, sweep_roc


def random_scores(rng, n_legit=None, n_attack=None, ties=False):
    nl = n_legit or int(rng.integers(1, 60))
    na = n_attack or int(rng.integers(1, 60))
    if ties:
        return ScoreSet(rng.integers(0, 8, nl).astype(float), rng.integers(2, 10, na).astype(float))
    return ScoreSet(rng.normal(1.0, 0.3, nl), rng.normal(1.5, 0.4, na))


def synthetic_fps(rng, centres, n, noise):
    return {d: c + noise * crandn(rng, n, c.size) for d, c in centres.items()}


class TestAdrAtFar:
    def test_separable(self):
        op = adr_at_far(([1, 2], [10, 11]), 0.0)
        assert op.threshold == 2 and op.far == 0 and op.adr == 1.0

    def test_interleaved(self):
        op = adr_at_far(([1, 3], [2, 4]), 0.0)
        assert op.threshold == 3 and op.far == 0 and op.adr == 0.5

    def test_far_within_cap(self, rng):
        for _ in range(50):
            s = random_scores(rng)
            for cap in (0.0, 0.03, 0.1, 0.5, 1.0):
                assert adr_at_far(s, cap).far <= cap

    def test_matches_sweep_oracle(self):
        rng = np.random.default_rng(77)
        for i in range(100):
            s = random_scores(rng, ties=i % 3 == 0)
            for cap in (0.0, 0.03, 0.25):
                op = adr_at_far(s, cap)
                t, adr, far = sweep_best_operating_point(s.legit, s.attack, cap)
                assert (op.threshold, op.adr, op.far) == (t, adr, far)

    def test_counting_conservation(self, rng):
        s = random_scores(rng, 40, 70)
        op = adr_at_far(s, 0.03)
        assert op.n_legit == 40 and op.n_attack == 70
        assert op.rejected_attack == round(op.adr * 70)
        assert op.rejected_legit == round(op.far * 40)
        assert 0 <= op.rejected_legit <= 40 and 0 <= op.rejected_attack <= 70

    def test_empty_class(self):
        with pytest.raises(ConfigError):
            adr_at_far(([], [1.0]), 0.0)

    def test_threshold_monotonicity(self, rng):
        s = random_scores(rng, 200, 200)
        pts = [operating_point(s, t) for t in np.linspace(0, 3, 100)]
        assert all(b.far <= a.far and b.adr <= a.adr for a, b in zip(pts, pts[1:]))


@settings(max_examples=80, deadline=None)
@given(
    legit=st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=30),
    attack=st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=30),
    cap=st.sampled_from([0.0, 0.03, 0.1, 0.5]),
)
def test_adr_at_far_oracle_property(legit, attack, cap):
    op = adr_at_far((legit, attack), cap)
    t, adr, far = sweep_best_operating_point(legit, attack, cap)
    assert (op.threshold, op.adr, op.far) == (t, adr, far)


class TestRoc:
    def test_perfect_separation(self):
        curve = roc_curve(([1, 2, 3], [5, 6]))
        assert (0.0, 1.0) in curve
        assert roc_auc(curve) == 1.0

    def test_endpoints_and_monotone(self, rng):
        curve = roc_curve(random_scores(rng, 50, 50))
        assert curve[0] == (0.0, 0.0) and curve[-1] == (1.0, 1.0)
        assert all(b[0] >= a[0] and b[1] >= a[1] for a, b in zip(curve, curve[1:]))

    def test_chance_level(self, rng):
        s = ScoreSet(rng.normal(size=5000), rng.normal(size=5000))
        assert roc_auc(roc_curve(s)) == pytest.approx(0.5, abs=0.02)

    def test_matches_sweep_oracle(self):
        rng = np.random.default_rng(78)
        for i in range(100):
            s = random_scores(rng, ties=i % 2 == 0)
            u = sorted(set(s.legit.tolist() + s.attack.tolist()))
            cands = [-math.inf, math.inf] + [(a + b) / 2 for a, b in zip(u[:-1], u[1:])]
            assert set(roc_curve(s)) == sweep_roc(s.legit, s.attack, cands)

    def test_subsampled_on_full_curve(self, rng):
        s = random_scores(rng, 300, 300)
        full = set(roc_curve(s))
        sub = roc_curve(s, max_points=25)
        assert len(sub) <= 25
        assert set(sub) <= full
        assert sub[0] == (0.0, 0.0) and sub[-1] == (1.0, 1.0)

    def test_candidates(self):
        t = candidate_thresholds(([1.0, 3.0], [3.0, 5.0]))
        assert list(t) == [-math.inf, 2.0, 4.0, math.inf]


class TestRotation:
    def test_eleven_devices_110_cells(self, rng):
        centres = {f"dev{i + 1}": 1 + 0.05 * crandn(rng, 56) for i in range(11)}
        lib = synthetic_fps(rng, centres, 30, 0.01)
        probes = synthetic_fps(rng, centres, 20, 0.01)
        rot = run_rotation(lib, probes)
        assert rot.n_cells() == 110
        assert sorted(rot.devices) == sorted(centres)
        for dev in rot.devices:
            assert all(a.size == 20 for a in rot.attacks[dev].values())

    def test_balanced_downsampling(self, rng):
        centres = {"a": np.ones(56, complex), "b": np.ones(56, complex) * 1.1}
        lib = synthetic_fps(rng, centres, 30, 0.01)
        probes = {"a": lib["a"][:10] + 0.001, "b": 1.1 + 0.01 * crandn(rng, 50, 56)}
        rot = run_rotation(lib, probes)
        assert rot.attacks["a"]["b"].size == 10
        assert rot.attacks["b"]["a"].size == 10
        x = balanced_probes(probes["b"], 10, 0, "a", "b")
        assert x.tobytes() == balanced_probes(probes["b"], 10, 0, "a", "b").tobytes()
        assert x.tobytes() != balanced_probes(probes["b"], 10, 1, "a", "b").tobytes()

    def test_clone_attack_at_chance(self, rng):
        centre = 1 + 0.05 * crandn(rng, 56)
        lib = synthetic_fps(rng, {"a": centre, "b": centre}, 400, 0.02)
        probes = synthetic_fps(rng, {"a": centre, "b": centre}, 2000, 0.02)
        rot = run_rotation(lib, probes)
        for dev in ("a", "b"):
            s = rot.scores(dev)
            assert roc_auc(roc_curve(s)) == pytest.approx(0.5, abs=0.03)
            op = adr_at_far(s, 0.1)
            assert op.adr == pytest.approx(op.far, abs=0.04)

    def test_simulated_clones_at_chance(self, config):
        # distortion-free devices are indistinguishable
        st_ = SimulationSettings(n_devices=2, n_packets=20000, magnitude_db=-math.inf, sigma=0.2, seed=4)
        fps = simulate_fingerprints(config, st_, (20,))
        rot = run_rotation(fps["room_a"][20], fps["room_b"][20])
        for dev in rot.devices:
            assert roc_auc(roc_curve(rot.scores(dev))) == pytest.approx(0.5, abs=0.05)

    def test_separated_devices_full_detection(self, config):
        st_ = SimulationSettings(n_devices=3, n_packets=400, sigma=1e-4, seed=2)
        fps = simulate_fingerprints(config, st_, (10,))
        rot = run_rotation(fps["room_a"][10], fps["room_b"][10])
        for dev in rot.devices:
            s = rot.scores(dev)
            assert adr_at_far(s, 0.0).adr == 1.0
            assert sweep_best_operating_point(s.legit, s.attack, 0.0)[1] == 1.0

    def test_workers_bit_identical(self, rng):
        centres = {f"d{i}": 1 + 0.05 * crandn(rng, 56) for i in range(5)}
        lib = synthetic_fps(rng, centres, 50, 0.05)
        probes = synthetic_fps(rng, centres, 80, 0.05)
        probes["d0"] = probes["d0"][:30]
        a = run_rotation(lib, probes, seed=3)
        b = run_rotation(lib, probes, seed=3, workers=3)
        for dev in a.devices:
            assert a.legit[dev].tobytes() == b.legit[dev].tobytes()
            assert a.library_loo[dev].tobytes() == b.library_loo[dev].tobytes()
            for other in a.attacks[dev]:
                assert a.attacks[dev][other].tobytes() == b.attacks[dev][other].tobytes()

    def test_missing_dataset(self, rng):
        lib = {"a": crandn(rng, 3, 56), "b": crandn(rng, 3, 56)}
        with pytest.raises(ConfigError, match="b"):
            run_rotation(lib, {"a": crandn(rng, 3, 56)})

    def test_loo_excludes_self(self, rng):
        centres = {"a": np.ones(56, complex), "b": np.full(56, 1.2 + 0j)}
        lib = synthetic_fps(rng, centres, 10, 0.01)
        rot = run_rotation(lib, synthetic_fps(rng, centres, 5, 0.01))
        assert np.all(rot.library_loo["a"] > 0)

    def test_grid_and_calibrated(self, rng):
        centres = {f"d{i}": 1 + 0.05 * crandn(rng, 56) for i in range(4)}
        fps = {
            room: {n: synthetic_fps(rng, centres, 40, 0.1 / math.sqrt(n)) for n in (10, 20)}
            for room in ("room_a", "room_b")
        }
        cells, rots = evaluate_grid(fps, (10, 20), (0.0, 0.03))
        assert [(c.n_csi, c.far_cap) for c in cells] == [(10, 0.0), (10, 0.03), (20, 0.0), (20, 0.03)]
        for c in cells:
            assert 0 <= c.adr <= 1 and 0 <= c.far <= c.far_cap
            assert 0 <= c.adr_calibrated <= 1 and 0 <= c.far_calibrated <= 1
            assert len(c.per_device) == 4
        assert summarize(rots[10], 10, 0.0) == cells[0]


class TestSimulation:
    def test_profiles_shared_between_rooms(self, config):
        st_ = SimulationSettings(n_devices=2, n_packets=50, seed=1)
        p = device_profiles(config, st_)
        a = simulate_device_array(config, st_, p[0], "room_a")
        b = simulate_device_array(config, st_, p[0], "room_b")
        assert a.shape == (2, 50, 56)
        assert not np.allclose(a, b)

    def test_records_match_arrays(self, config):
        st_ = SimulationSettings(n_devices=2, n_packets=30, seed=1)
        arrays = dict(records_to_arrays(simulate_room_records(config, st_, "room_b")))
        for p in device_profiles(config, st_):
            assert arrays[p.device_id].tobytes() == simulate_device_array(config, st_, p, "room_b").tobytes()

    def test_room_timestamps_disjoint(self, config):
        st_ = SimulationSettings(n_devices=1, n_packets=10, seed=1)
        a = [m.timestamp_us for m in simulate_room_records(config, st_, "room_a")]
        b = [m.timestamp_us for m in simulate_room_records(config, st_, "room_b")]
        assert max(a) < min(b)

    def test_unknown_room(self, config):
        st_ = SimulationSettings(n_devices=1, n_packets=10)
        with pytest.raises(ConfigError):
            list(simulate_room_records(config, st_, "room_c"))

    def test_fingerprint_counts(self, config):
        st_ = SimulationSettings(n_devices=2, n_packets=600, seed=1)
        fps = simulate_fingerprints(config, st_, (10, 200))
        assert fps["room_a"][10]["dev1"].shape == (60, 56)
        assert fps["room_b"][200]["dev2"].shape == (3, 56)


class TestStability:
    def test_identical(self):
        v = 1 + 0.1j * np.arange(56)
        rep = stability_report({"a": [v, v, v]})
        for table in (rep.complex_var, rep.amplitude_var, rep.phase_var):
            assert np.all(table["a"] == 0)

    def test_known_variance(self):
        rng = np.random.default_rng(5)
        var = np.linspace(1e-4, 4e-3, 56)
        x = 1 + np.sqrt(var / 2) * crandn(rng, 10_000, 56)
        rep = stability_report({"a": x})
        np.testing.assert_allclose(rep.complex_var["a"], var, rtol=0.15)
        # small noise: amplitude and phase each carry half the complex variance
        np.testing.assert_allclose(rep.amplitude_var["a"], var / 2, rtol=0.15)
        np.testing.assert_allclose(rep.phase_var["a"], var / 2, rtol=0.15)

    def test_inflated_tones_rank_first(self, config):
        rng = np.random.default_rng(6)
        tones = config.signed_subcarriers
        scale = np.full(56, 0.01)
        for t in (5, 6, 7):
            scale[list(tones).index(t)] = 0.05
        x = 1 + scale * crandn(rng, 500, 56)
        rep = stability_report({"a": x}, tones)
        assert set(rep.top_tones("a", 3)) == {5, 6, 7}
        for kind in ("amplitude", "phase"):
            assert set(rep.top_tones("a", 3, kind)) == {5, 6, 7}

    def test_phase_wrap(self):
        # phases straddling +/-pi must not look noisy
        x = -np.exp(1j * np.array([[0.01], [-0.01], [0.02], [-0.02]]))
        rep = stability_report({"a": x})
        assert rep.phase_var["a"][0] < 1e-3

    def test_rows(self):
        rep = stability_report({"a": np.ones((2, 3)), "b": np.ones((2, 3))})
        rows = list(rep.rows())
        assert len(rows) == 6 and rows[0][:2] == ("a", 0)

    def test_needs_two(self):
        with pytest.raises(ConfigError):
            stability_report({"a": np.ones((1, 3))})
