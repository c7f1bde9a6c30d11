import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microcsi.errors import ConfigError
from microcsi.signal import (
    SignalConfig,
    build_config,
    config_from_dict,
    estimate_csi,
    partial_dft,
    project_onto_taps,
    tap_coefficients,
)
from oracles import crandn, full_unitary_dft, normal_equation_fit, pinv_projector


class TestBuildConfig:
    def test_ht20_default(self, config):
        assert config.n_tones == 56
        assert config.n_taps == 17
        assert config.dft_len == 64

    def test_ht20_tone_layout(self, config):
        signed = config.signed_subcarriers
        assert list(signed) == list(range(-28, 0)) + list(range(1, 29))
        assert 0 not in config.subcarriers

    def test_zero_leakage_single_tap(self):
        cfg = build_config(64, "ht20", 0)
        assert cfg.n_taps == 1
        assert list(cfg.tap_set) == [0]

    def test_underdetermined_window_rejected(self):
        with pytest.raises(ConfigError, match="underdetermined"):
            build_config(64, "ht20", 28)

    def test_unknown_map(self):
        with pytest.raises(ConfigError, match="unknown subcarrier map"):
            build_config(64, "vht160", 8)

    @pytest.mark.parametrize("n", [48, 0, 100])
    def test_dft_len_must_be_power_of_two(self, n):
        with pytest.raises(ConfigError):
            build_config(n, "ht20", 8)

    def test_map_defined_only_for_its_length(self):
        with pytest.raises(ConfigError, match="defined for N=64"):
            build_config(128, "ht20", 8)

    def test_tap_set_wraps_mod_n(self, config):
        assert list(config.tap_set) == [56, 57, 58, 59, 60, 61, 62, 63, 0, 1, 2, 3, 4, 5, 6, 7, 8]

    def test_lts_is_plus_minus_one(self, config):
        assert np.all(np.abs(config.lts) == 1.0)
        assert set(config.lts.real) == {-1.0, 1.0}
        # HT-LTF edges: +1 +1 at -28,-27 and -1 -1 at +27,+28
        assert list(config.lts.real[:2]) == [1, 1]
        assert list(config.lts.real[-2:]) == [-1, -1]

    def test_legacy_map(self):
        cfg = build_config(64, "legacy20", 8)
        assert cfg.n_tones == 52

    def test_lts_override_must_be_unit_magnitude(self):
        with pytest.raises(ConfigError, match="unit magnitude"):
            build_config(64, "ht20", 8, lts=np.full(56, 0.5))

    def test_arrays_are_read_only(self, config):
        with pytest.raises(ValueError):
            config.subcarriers[0] = 3

    def test_duplicate_subcarriers_rejected(self):
        with pytest.raises(ConfigError, match="distinct"):
            SignalConfig(64, np.array([1, 1, 2] + list(range(3, 30))), np.ones(30), 2, np.arange(-2, 3) % 64)

    def test_digest_stable_and_dict_round_trip(self, config):
        again = config_from_dict(config.to_dict())
        assert again.digest == config.digest
        assert again == config
        assert build_config(64, "ht20", 7).digest != config.digest


class TestPartialDft:
    def test_tap_zero_column_is_flat(self, config):
        col = config.pdft.matrix[:, list(config.tap_set).index(0)]
        np.testing.assert_allclose(col, np.full(56, 1 / 8), rtol=0, atol=1e-15)

    def test_gram_inverse(self, config):
        pd = partial_dft(config)
        gram = pd.matrix.conj().T @ pd.matrix
        np.testing.assert_allclose(pd.gram_inverse @ gram, np.eye(17), rtol=0, atol=1e-10)

    def test_matches_brute_force_full_dft(self, config):
        full = full_unitary_dft(64)
        expected = full[np.ix_(config.subcarriers, config.tap_set)]
        np.testing.assert_allclose(config.pdft.matrix, expected, rtol=0, atol=1e-13)

    def test_full_dft_oracle_is_unitary(self):
        f = full_unitary_dft(64)
        np.testing.assert_allclose(f.conj().T @ f, np.eye(64), atol=1e-12)

    def test_cached(self, config):
        assert config.pdft is config.pdft


class TestProjection:
    def test_columns_fixed(self, config):
        for j in range(config.n_taps):
            col = config.pdft.matrix[:, j]
            np.testing.assert_allclose(project_onto_taps(config, col), col, atol=1e-12)

    def test_residual_projects_to_zero(self, config, rng):
        v = crandn(rng, 56)
        r = v - project_onto_taps(config, v)
        assert np.max(np.abs(project_onto_taps(config, r))) <= 1e-10

    def test_matches_normal_equations(self, config, rng):
        for _ in range(20):
            v = crandn(rng, 56)
            ref = normal_equation_fit(full_unitary_dft(64)[np.ix_(config.subcarriers, config.tap_set)], v)
            np.testing.assert_allclose(project_onto_taps(config, v), ref, rtol=0, atol=1e-10)

    def test_matches_pseudo_inverse(self, config, rng):
        p = pinv_projector(config.pdft.matrix)
        v = crandn(rng, 200, 56)
        assert np.max(np.abs(project_onto_taps(config, v) - v @ p.T)) <= 1e-10

    def test_batch_equals_single(self, config, rng):
        v = crandn(rng, 5, 56)
        batch = project_onto_taps(config, v)
        for i in range(5):
            np.testing.assert_allclose(batch[i], project_onto_taps(config, v[i]), atol=1e-14)

    def test_trace_equals_tap_count(self, config):
        assert abs(np.trace(config.pdft.projector).real - config.n_taps) <= 1e-8

    def test_wrong_length(self, config):
        with pytest.raises(ConfigError):
            project_onto_taps(config, np.ones(55))

    def test_tap_coefficients_recover_taps(self, config, rng):
        taps = crandn(rng, 17)
        v = config.pdft.matrix @ taps
        np.testing.assert_allclose(tap_coefficients(config, v), taps, atol=1e-10)


vectors = st.integers(0, 2**32 - 1).map(lambda s: crandn(np.random.default_rng(s), 56))
scalars = st.complex_numbers(min_magnitude=1e-3, max_magnitude=1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(v=vectors)
def test_idempotent(v):
    cfg = build_config()
    pv = project_onto_taps(cfg, v)
    assert np.linalg.norm(project_onto_taps(cfg, pv) - pv) <= 1e-10 * np.linalg.norm(v)


@settings(max_examples=50, deadline=None)
@given(u=vectors, v=vectors)
def test_self_adjoint(u, v):
    cfg = build_config()
    lhs = np.vdot(project_onto_taps(cfg, u), v)
    rhs = np.vdot(u, project_onto_taps(cfg, v))
    assert abs(lhs - rhs) <= 1e-10


@settings(max_examples=50, deadline=None)
@given(v=vectors, alpha=scalars)
def test_scale_equivariant(v, alpha):
    cfg = build_config()
    np.testing.assert_allclose(
        project_onto_taps(cfg, alpha * v), alpha * project_onto_taps(cfg, v), rtol=1e-12, atol=1e-12 * abs(alpha)
    )


@settings(max_examples=30, deadline=None)
@given(u=vectors, v=vectors)
def test_additive(u, v):
    cfg = build_config()
    np.testing.assert_allclose(
        project_onto_taps(cfg, u + v), project_onto_taps(cfg, u) + project_onto_taps(cfg, v), atol=1e-12
    )


def test_estimate_csi_divides_by_lts(config, rng):
    h = crandn(rng, 56)
    np.testing.assert_allclose(estimate_csi(config, h * config.lts), h, atol=0)


def test_estimate_csi_general_unit_lts(rng):
    lts = np.exp(2j * np.pi * rng.uniform(size=56))
    cfg = build_config(lts=lts)
    h = crandn(rng, 56)
    np.testing.assert_allclose(estimate_csi(cfg, h * lts), h, atol=1e-14)
