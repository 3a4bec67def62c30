"""Config validation, symbol model, and closed-form numerics.

Regression constants come from tests/oracles/closed_forms.py, a stdlib-only
reference implementation run before this package existed.
"""
import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qkdsim.protocol import (
    Basis,
    ConfigError,
    Intensity,
    ProtocolConfig,
    StateSymbol,
    binary_entropy,
    config_violations,
    poisson_pn,
    rng_stream,
    tau_n,
    validate_config,
)

REL = 1e-9


class TestProtocolConfig:
    def test_defaults(self):
        cfg = ProtocolConfig()
        assert cfg.qubit_rate == 1.25e9
        assert cfg.mu1 == 0.31
        assert cfg.mu2 == 0.10
        assert cfg.p_mu1 == 0.8
        assert cfg.pz_alice == 0.9
        assert cfg.pz_bob == 0.75
        assert cfg.sequence_length == 5000
        assert cfg.eps_sec == 1e-9
        assert cfg.eps_corr == 1e-9
        assert cfg.f_ec == 1.16
        assert cfg.block_size == 100_000_000

    def test_derived_probabilities(self):
        cfg = ProtocolConfig()
        assert cfg.p_mu2 == pytest.approx(0.2, rel=1e-15)
        assert cfg.px_alice == pytest.approx(0.1, rel=1e-12)
        assert cfg.px_bob == pytest.approx(0.25, rel=1e-15)

    def test_valid_config_passes(self):
        assert config_violations(ProtocolConfig()) == []

    @pytest.mark.parametrize("changes,fragment", [
        (dict(mu1=0.10, mu2=0.31), "mu2 must be strictly less than mu1"),
        (dict(mu2=0.0), "mu2"),
        (dict(mu1=1.0), "mu1"),
        (dict(mu1=-0.3), "mu1"),
        (dict(p_mu1=0.0), "probability"),
        (dict(p_mu1=1.0), "probability"),
        (dict(pz_alice=1.2), "probability"),
        (dict(pz_bob=-0.1), "probability"),
        (dict(eps_sec=0.0), "eps"),
        (dict(eps_corr=1.0), "eps"),
        (dict(f_ec=0.99), "f_ec"),
        (dict(qubit_rate=0.0), "qubit_rate"),
        (dict(sequence_length=0), "sequence_length"),
        (dict(block_size=0), "block_size"),
    ])
    def test_violations_detected(self, changes, fragment):
        cfg = ProtocolConfig().with_(**changes)
        found = config_violations(cfg)
        assert found, f"expected a violation for {changes}"
        assert any(fragment in v for v in found)
        with pytest.raises(ConfigError):
            validate_config(cfg)

    def test_error_carries_all_violations(self):
        cfg = ProtocolConfig().with_(mu1=0.1, mu2=0.3, f_ec=0.5)
        with pytest.raises(ConfigError) as exc:
            validate_config(cfg)
        assert len(exc.value.violations) >= 2

    def test_json_round_trip(self):
        cfg = ProtocolConfig().with_(mu1=0.42, block_size=12345)
        again = ProtocolConfig.from_json(cfg.to_json())
        assert again == cfg
        assert again.to_json() == cfg.to_json()

    def test_unknown_field_rejected(self):
        payload = json.loads(ProtocolConfig().to_json())
        payload["detector_gain"] = 2.0
        with pytest.raises(ConfigError) as exc:
            ProtocolConfig.from_dict(payload)
        assert any("detector_gain" in v for v in exc.value.violations)

    def test_from_dict_validates(self):
        payload = json.loads(ProtocolConfig().to_json())
        payload["mu2"] = 0.9
        with pytest.raises(ConfigError):
            ProtocolConfig.from_dict(payload)

    def test_with_returns_new_instance(self):
        cfg = ProtocolConfig()
        other = cfg.with_(mu1=0.5)
        assert other.mu1 == 0.5
        assert cfg.mu1 == 0.31


class TestStateSymbol:
    def test_key_basis_needs_bit(self):
        sym = StateSymbol(basis=Basis.Z, intensity=Intensity.SIGNAL, z_value=1)
        assert sym.z_value == 1
        with pytest.raises(ValueError):
            StateSymbol(basis=Basis.Z, intensity=Intensity.SIGNAL, z_value=None)
        with pytest.raises(ValueError):
            StateSymbol(basis=Basis.Z, intensity=Intensity.SIGNAL, z_value=2)

    def test_monitor_basis_has_no_bit(self):
        sym = StateSymbol(basis=Basis.X, intensity=Intensity.DECOY, z_value=None)
        assert sym.z_value is None
        with pytest.raises(ValueError):
            StateSymbol(basis=Basis.X, intensity=Intensity.SIGNAL, z_value=0)


class TestBinaryEntropy:
    def test_reference_value(self):
        assert binary_entropy(0.0443) == pytest.approx(0.261671515511, rel=REL)

    def test_endpoints_and_max(self):
        assert binary_entropy(0.0) == 0.0
        assert binary_entropy(1.0) == 0.0
        assert binary_entropy(0.5) == 1.0

    def test_domain(self):
        with pytest.raises(ValueError):
            binary_entropy(-0.01)
        with pytest.raises(ValueError):
            binary_entropy(1.01)

    @given(st.floats(min_value=0.0, max_value=1.0, allow_nan=False))
    def test_symmetry_and_range(self, x):
        hx = binary_entropy(x)
        assert 0.0 <= hx <= 1.0
        assert hx == pytest.approx(binary_entropy(1.0 - x), abs=1e-12)


class TestPhotonStatistics:
    def test_reference_values(self):
        assert poisson_pn(0.31, 0) == pytest.approx(0.733446956224, rel=REL)
        assert poisson_pn(0.10, 2) == pytest.approx(0.004524187090, rel=REL)

    def test_vacuum_source(self):
        assert poisson_pn(0.0, 0) == 1.0
        assert poisson_pn(0.0, 3) == 0.0

    @given(st.floats(min_value=1e-6, max_value=5.0))
    @settings(max_examples=50)
    def test_normalization(self, mu):
        total = sum(poisson_pn(mu, n) for n in range(80))
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_tau_reference_values(self):
        cfg = ProtocolConfig()
        assert tau_n(cfg, 0) == pytest.approx(0.767725048587, rel=REL)
        assert tau_n(cfg, 1) == pytest.approx(0.199991593504, rel=REL)
        loud = cfg.with_(mu1=0.6, mu2=0.2, pz_alice=0.8, pz_bob=0.5)
        assert tau_n(loud, 0) == pytest.approx(0.602795459491, rel=REL)
        assert tau_n(loud, 1) == pytest.approx(0.296178815448, rel=REL)

    @given(st.floats(min_value=0.02, max_value=0.9),
           st.floats(min_value=0.05, max_value=0.95))
    @settings(max_examples=50)
    def test_tau_partition_of_unity(self, mu2_frac, p_mu1):
        mu1 = 0.95
        cfg = ProtocolConfig().with_(mu1=mu1, mu2=mu1 * mu2_frac * 0.99,
                                     p_mu1=p_mu1)
        total = sum(tau_n(cfg, n) for n in range(80))
        assert total == pytest.approx(1.0, abs=1e-9)


class TestRngStreams:
    def test_reproducible(self):
        a = rng_stream(7, "detector/0").integers(0, 1 << 30, 8)
        b = rng_stream(7, "detector/0").integers(0, 1 << 30, 8)
        assert (a == b).all()

    def test_labels_decorrelate(self):
        a = rng_stream(7, "detector/0").integers(0, 1 << 30, 8)
        b = rng_stream(7, "detector/1").integers(0, 1 << 30, 8)
        c = rng_stream(8, "detector/0").integers(0, 1 << 30, 8)
        assert not (a == b).all()
        assert not (a == c).all()
