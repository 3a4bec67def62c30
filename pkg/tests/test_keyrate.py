"""Finite-key engine: sifting, bounds, leakage, key length, optimization.

Regression constants come from tests/oracles/closed_forms.py and
tests/oracles/reconstruction_reference.py, stdlib-only references written
and frozen before this package existed.
"""
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
    tau_n,
)
from qkdsim.keyrate import (
    ChannelSummary,
    TallyBlock,
    assemble_key_length,
    decoy_bounds,
    ec_leakage,
    hoeffding_delta,
    optimize_parameters,
    qber,
    secret_key_length,
    sift,
    tallies_from_rates,
)

REL = 1e-9

ACTIVE_CFG = ProtocolConfig(mu1=0.31, mu2=0.10, p_mu1=0.8,
                            pz_alice=0.9, pz_bob=0.75)
LOUD_CFG = ProtocolConfig(mu1=0.6, mu2=0.2, p_mu1=0.8,
                          pz_alice=0.8, pz_bob=0.5)


def active_blocks():
    b1 = tallies_from_rates(ACTIVE_CFG, 1,
                            rate_z_mu1_hz=3.78e6, rate_z_mu2_hz=0.32e6,
                            qber_z_mu1=0.0443, qber_z_mu2=0.0443,
                            qber_x_mu1=0.0214, qber_x_mu2=0.0214, total_z=1e9)
    b2 = tallies_from_rates(ACTIVE_CFG, 2,
                            rate_z_mu1_hz=1.97e6, rate_z_mu2_hz=0.17e6,
                            qber_z_mu1=0.0556, qber_z_mu2=0.0556,
                            qber_x_mu1=0.0214, qber_x_mu2=0.0214, total_z=1e9)
    return b1, b2


def loud_blocks():
    c1 = tallies_from_rates(LOUD_CFG, 1,
                            rate_z_mu1_hz=1.73e6, rate_z_mu2_hz=0.25e6,
                            qber_z_mu1=0.013, qber_z_mu2=0.0086,
                            qber_x_mu1=0.027, qber_x_mu2=0.0322, total_z=1e9)
    c2 = tallies_from_rates(LOUD_CFG, 2,
                            rate_z_mu1_hz=2.47e6, rate_z_mu2_hz=0.18e6,
                            qber_z_mu1=0.0435, qber_z_mu2=0.0385,
                            qber_x_mu1=0.027, qber_x_mu2=0.0322, total_z=1e9)
    return c1, c2


class TestTallyBlock:
    def test_counts_must_be_consistent(self):
        with pytest.raises(ValueError):
            TallyBlock(n_z_mu1=10, n_z_mu2=5, m_z_mu1=11, m_z_mu2=0,
                       n_x_mu1=1, n_x_mu2=1, m_x_mu1=0, m_x_mu2=0,
                       duration=1.0, mode=0, cfg=ACTIVE_CFG)
        with pytest.raises(ValueError):
            TallyBlock(n_z_mu1=10, n_z_mu2=5, m_z_mu1=1, m_z_mu2=0,
                       n_x_mu1=1, n_x_mu2=1, m_x_mu1=0, m_x_mu2=0,
                       duration=0.0, mode=0, cfg=ACTIVE_CFG)

    def test_pooled_properties(self):
        b1, _ = active_blocks()
        assert b1.n_z == pytest.approx(1e9, rel=1e-12)
        assert b1.m_z == pytest.approx(0.0443e9, rel=1e-12)

    def test_dict_round_trip(self):
        b1, _ = active_blocks()
        again = TallyBlock.from_dict(b1.to_dict())
        assert again == b1

    def test_unknown_field_rejected(self):
        payload = active_blocks()[0].to_dict()
        payload["afterpulse"] = 1
        with pytest.raises(ConfigError):
            TallyBlock.from_dict(payload)


class TestSift:
    @staticmethod
    def _detections(pairs):
        from qkdsim.link import DetectionRecord
        return [DetectionRecord(pulse_index=i, basis=b, outcome=o,
                                timestamp_ps=i * 800)
                for i, b, o in pairs]

    def test_reference_error_fraction(self):
        # 10000 sifted key-basis detections, 443 flipped: QBER 4.43%
        symbols = [StateSymbol(Basis.Z, Intensity.SIGNAL, i % 2)
                   for i in range(10_000)]
        dets = self._detections(
            (i, Basis.Z, (sym.z_value ^ 1) if i < 443 else sym.z_value)
            for i, sym in enumerate(symbols))
        block = sift(symbols, dets, ACTIVE_CFG, duration=1.0)
        assert block.n_z == 10_000
        assert block.m_z == 443
        assert qber(block, Basis.Z) == pytest.approx(0.0443, rel=1e-12)

    def test_basis_mismatch_dropped(self):
        symbols = [StateSymbol(Basis.Z, Intensity.SIGNAL, 0),
                   StateSymbol(Basis.X, Intensity.DECOY, None)]
        dets = self._detections([(0, Basis.X, 0), (1, Basis.Z, 1)])
        block = sift(symbols, dets, ACTIVE_CFG, duration=1.0)
        assert block.n_z == 0 and block.n_x == 0

    def test_monitor_basis_error_mapping(self):
        symbols = [StateSymbol(Basis.X, Intensity.SIGNAL, None)] * 4
        dets = self._detections([(0, Basis.X, 0), (1, Basis.X, 1),
                                 (2, Basis.X, 0), (3, Basis.X, 1)])
        block = sift(symbols, dets, ACTIVE_CFG, duration=1.0)
        assert block.n_x_mu1 == 4
        assert block.m_x_mu1 == 2

    def test_intensity_routing(self):
        symbols = [StateSymbol(Basis.Z, Intensity.SIGNAL, 0),
                   StateSymbol(Basis.Z, Intensity.DECOY, 1)]
        dets = self._detections([(0, Basis.Z, 0), (1, Basis.Z, 0)])
        block = sift(symbols, dets, ACTIVE_CFG, duration=1.0)
        assert block.n_z_mu1 == 1 and block.m_z_mu1 == 0
        assert block.n_z_mu2 == 1 and block.m_z_mu2 == 1

    def test_out_of_range_index(self):
        symbols = [StateSymbol(Basis.Z, Intensity.SIGNAL, 0)]
        dets = self._detections([(3, Basis.Z, 0)])
        with pytest.raises(IndexError):
            sift(symbols, dets, ACTIVE_CFG, duration=1.0)

    def test_qber_requires_detections(self):
        b1, _ = active_blocks()
        empty = TallyBlock(n_z_mu1=0, n_z_mu2=0, m_z_mu1=0, m_z_mu2=0,
                           n_x_mu1=0, n_x_mu2=0, m_x_mu1=0, m_x_mu2=0,
                           duration=1.0, mode=0, cfg=ACTIVE_CFG)
        with pytest.raises(ValueError):
            qber(empty, Basis.Z)
        assert qber(b1, Basis.Z, Intensity.DECOY) == pytest.approx(0.0443, rel=REL)


class TestConcentration:
    def test_reference_value(self):
        assert hoeffding_delta(1e9, 1e-9) == pytest.approx(101792.106366, rel=REL)

    def test_domain(self):
        with pytest.raises(ValueError):
            hoeffding_delta(100.0, 0.0)
        with pytest.raises(ValueError):
            hoeffding_delta(-1.0, 1e-9)
        assert hoeffding_delta(0.0, 1e-9) == 0.0

    @given(st.floats(min_value=1.0, max_value=1e12),
           st.floats(min_value=1e-12, max_value=0.5))
    @settings(max_examples=50)
    def test_monotonicity(self, n, eps):
        d = hoeffding_delta(n, eps)
        assert d >= 0.0
        assert hoeffding_delta(2.0 * n, eps) > d
        assert hoeffding_delta(n, eps / 2.0) > d


class TestLeakage:
    def test_reference_value(self):
        assert ec_leakage(1e9, 0.0443, 1.16) == pytest.approx(3.035390e8, rel=1e-6)
        assert ec_leakage(1e9, 0.0443, 1.16) == pytest.approx(
            1.16 * 1e9 * binary_entropy(0.0443), rel=1e-15)

    def test_domain(self):
        with pytest.raises(ValueError):
            ec_leakage(-1.0, 0.01, 1.16)
        with pytest.raises(ValueError):
            ec_leakage(1e6, 1.01, 1.16)
        assert ec_leakage(1e6, 0.0, 1.16) == 0.0


class TestKeyLengthFormula:
    def test_assembly_is_exact(self):
        # the closed form, spelled out independently of the implementation
        d0, d1, phi, lam = 1.5e6, 6.8e8, 0.0297, 3.03e8
        eps_sec = eps_corr = 1e-9
        expected = (d0 + d1 * (1.0 - binary_entropy(phi)) - lam
                    - 6.0 * math.log2(21.0 / eps_sec)
                    - 2.0 * math.log2(2.0 / eps_corr))
        got = assemble_key_length(d0, d1, phi, lam, eps_sec, eps_corr)
        assert got == pytest.approx(expected, rel=1e-15)

    def test_epsilon_partitions_parameter(self):
        tighter = assemble_key_length(0, 1e9, 0.02, 0, 1e-9, 1e-9,
                                      eps_partitions=7.0)
        looser = assemble_key_length(0, 1e9, 0.02, 0, 1e-9, 1e-9,
                                     eps_partitions=21.0)
        assert tighter > looser
        assert tighter - looser == pytest.approx(6.0 * math.log2(3.0), abs=1e-6)


class TestReferenceReconstruction:
    def test_active_mode1(self):
        b1, _ = active_blocks()
        r = secret_key_length(b1)
        assert r.d0 == pytest.approx(0.0, abs=1e-6)
        assert r.d1 == pytest.approx(686234747.6980186, rel=REL)
        assert r.phi_z == pytest.approx(0.029761442723901403, rel=REL)
        assert r.lambda_ec == pytest.approx(303538957.99309075, rel=REL)
        assert r.secret_key_length_raw == pytest.approx(250119024.1573567, rel=REL)
        assert r.skr == pytest.approx(1025487.9990451625, rel=REL)
        assert not r.infeasible

    def test_active_mode2_with_shared_monitor_statistics(self):
        b1, b2 = active_blocks()
        r = secret_key_length(b2, x_donor=b1)
        assert r.d1 == pytest.approx(681524419.182124, rel=REL)
        assert r.phi_z == pytest.approx(0.02976148025147871, rel=REL)
        assert r.lambda_ec == pytest.approx(359281077.73820305, rel=REL)
        assert r.skr == pytest.approx(407833.61362417345, rel=REL)

    def test_active_total(self):
        b1, b2 = active_blocks()
        total = secret_key_length(b1).skr + secret_key_length(b2, x_donor=b1).skr
        assert total == pytest.approx(1433321.612669336, rel=REL)

    def test_loud_mode1_single_photon_cap(self):
        c1, _ = loud_blocks()
        r = secret_key_length(c1)
        # inconsistent per-intensity rates push the raw bound above the
        # population cap; the clamp lands exactly at n_z - d0
        assert r.d1 == pytest.approx(903266202.7937028, rel=REL)
        assert r.d0 == pytest.approx(96733797.20629713, rel=REL)
        assert r.d0 + r.d1 == pytest.approx(c1.n_z, rel=1e-12)
        assert r.skr == pytest.approx(1465838.0726934248, rel=REL)

    def test_loud_mode2_negative_raw_length(self):
        c1, c2 = loud_blocks()
        r = secret_key_length(c2, x_donor=c1)
        assert r.secret_key_length_raw == pytest.approx(-20275103.023676462,
                                                        rel=1e-6)
        assert r.secret_key_length == 0.0
        assert r.skr == 0.0


class TestDecoyBounds:
    def test_suppressed_decoy_transmission_flags_infeasible(self):
        # decoy-window transmission 2.5x below the signal window is the
        # photon-number-splitting signature: raw single-photon bound < 0
        b = tallies_from_rates(ACTIVE_CFG, 1,
                               rate_z_mu1_hz=3.78e6, rate_z_mu2_hz=0.32e6 / 2.5,
                               qber_z_mu1=0.0443, qber_z_mu2=0.0443,
                               qber_x_mu1=0.0214, qber_x_mu2=0.0214, total_z=1e9)
        d0, d1, phi, bz = decoy_bounds(b)
        assert bz.infeasible
        assert bz.s1_raw == pytest.approx(-17761550.812231667, rel=REL)
        assert d1 == 0.0
        assert phi == 0.5

    def test_inflated_decoy_transmission_does_not_flag(self):
        b = tallies_from_rates(ACTIVE_CFG, 1,
                               rate_z_mu1_hz=3.78e6, rate_z_mu2_hz=0.32e6 * 1.3,
                               qber_z_mu1=0.0443, qber_z_mu2=0.0443,
                               qber_x_mu1=0.0214, qber_x_mu2=0.0214, total_z=1e9)
        _, _, _, bz = decoy_bounds(b)
        assert not bz.infeasible

    def test_asymptotic_single_photon_recovery(self):
        # unit transmission, no errors: every multi-photon pulse clicks, so
        # the true single-photon fraction is tau1 / (1 - tau0)
        cfg = ACTIVE_CFG
        n1 = 1e12 * cfg.p_mu1 * (1.0 - math.exp(-cfg.mu1))
        n2 = 1e12 * cfg.p_mu2 * (1.0 - math.exp(-cfg.mu2))
        blk = TallyBlock(n_z_mu1=n1, n_z_mu2=n2, m_z_mu1=0.0, m_z_mu2=0.0,
                         n_x_mu1=n1, n_x_mu2=n2, m_x_mu1=0.0, m_x_mu2=0.0,
                         duration=1.0, mode=0, cfg=cfg)
        d0, d1, phi, _ = decoy_bounds(blk, finite_size=False)
        truth = tau_n(cfg, 1) / (1.0 - tau_n(cfg, 0))
        assert truth == pytest.approx(0.861012314446, rel=REL)
        frac = d1 / (n1 + n2)
        assert frac == pytest.approx(0.8560755906646256, rel=REL)
        assert frac <= truth
        assert frac >= 0.99 * truth
        assert d0 == 0.0
        assert phi == 0.0

    def test_missing_monitor_statistics_gives_vacuous_phase_error(self):
        b = TallyBlock(n_z_mu1=8e8, n_z_mu2=2e8, m_z_mu1=1e7, m_z_mu2=2e6,
                       n_x_mu1=0, n_x_mu2=0, m_x_mu1=0, m_x_mu2=0,
                       duration=1.0, mode=2, cfg=ACTIVE_CFG)
        _, _, phi, _ = decoy_bounds(b)
        assert phi == 0.5

    def test_donor_replaces_monitor_cells(self):
        b1, b2 = active_blocks()
        bare = TallyBlock(n_z_mu1=b2.n_z_mu1, n_z_mu2=b2.n_z_mu2,
                          m_z_mu1=b2.m_z_mu1, m_z_mu2=b2.m_z_mu2,
                          n_x_mu1=0, n_x_mu2=0, m_x_mu1=0, m_x_mu2=0,
                          duration=b2.duration, mode=2, cfg=ACTIVE_CFG)
        _, _, phi_donor, _ = decoy_bounds(bare, x_donor=b1)
        _, _, phi_self, _ = decoy_bounds(b2, x_donor=b1)
        assert phi_donor == pytest.approx(phi_self, rel=1e-12)

    @given(st.floats(min_value=1e3, max_value=1e9),
           st.floats(min_value=0.01, max_value=1.0),
           st.floats(min_value=0.0, max_value=0.12),
           st.floats(min_value=0.0, max_value=0.12))
    @settings(max_examples=80, deadline=None)
    def test_bound_invariants(self, n1, ratio, q1, q2):
        n2 = n1 * ratio
        blk = TallyBlock(n_z_mu1=n1, n_z_mu2=n2,
                         m_z_mu1=q1 * n1, m_z_mu2=q2 * n2,
                         n_x_mu1=n1 * 0.03, n_x_mu2=n2 * 0.03,
                         m_x_mu1=q1 * n1 * 0.03, m_x_mu2=q2 * n2 * 0.03,
                         duration=1.0, mode=0, cfg=ACTIVE_CFG)
        d0, d1, phi, bz = decoy_bounds(blk)
        n = n1 + n2
        assert 0.0 <= d0 <= n
        assert 0.0 <= d1 <= n - d0 + 1e-9
        assert 0.0 <= bz.v1_up <= blk.m_z + 1e-9
        assert 0.0 <= phi <= 0.5
        assert bz.infeasible == (bz.s1_raw < 0.0)


class TestShortBlockFlag:
    def test_flag_tracks_block_size(self):
        b1, _ = active_blocks()
        assert not secret_key_length(b1).short_block
        small = tallies_from_rates(ACTIVE_CFG, 1,
                                   rate_z_mu1_hz=3.78e6, rate_z_mu2_hz=0.32e6,
                                   qber_z_mu1=0.0443, qber_z_mu2=0.0443,
                                   qber_x_mu1=0.0214, qber_x_mu2=0.0214,
                                   total_z=1e6)
        assert secret_key_length(small).short_block


class TestOptimizeParameters:
    def test_typical_channel(self):
        summary = ChannelSummary(loss_db=5.0, qber_z=0.01, qber_x=0.02)
        best, diag = optimize_parameters(summary)
        assert best.pz_alice >= 0.8
        assert best.mu1 / best.mu2 == pytest.approx(3.1, rel=1e-9)
        assert diag["converged"]
        # the coarse grid must already land within 1% of the refined optimum
        assert diag["grid_skr"] >= 0.99 * diag["objective_skr"]

    def test_search_space_respected(self):
        summary = ChannelSummary(loss_db=5.0, qber_z=0.01, qber_x=0.02)
        best, _ = optimize_parameters(summary, search_space={"mu1": (0.1, 0.3)},
                                      grid=6)
        assert 0.1 <= best.mu1 <= 0.3
