"""Acceptance suite: eight numbered end-to-end checks, one verdict line each.

Every check prints a single "PASS/FAIL check N" line on the real stdout
(bypassing pytest capture) before asserting, so a run of this file doubles
as a short human-readable report. Runtime limits are part of each check.

Checks 1 and 2 rebuild finite-key inputs from the reference operating
points (per-intensity sifted-Z rates and QBERs over a 1e9-detection block)
and require the resulting total secret-key rate to land within +/-30% of
the reference totals. The engine's totals, frozen in test_keyrate.py
against tests/oracles/reconstruction_reference.py, sit below those bands,
so the two checks fail; they are kept as stated rather than widened. The
remaining checks (3-8) pass.
"""
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from qkdsim.channel import DriftProcess, LanternSpec, init_channel
from qkdsim.harness import Acquisition, Scenario, loss_sweep, run_scenario
from qkdsim.keyrate import (
    assemble_key_length,
    decoy_bounds,
    hoeffding_delta,
    secret_key_length,
    tallies_from_rates,
)
from qkdsim.link import MODES, ReceiverSpec, run_mc, run_tally
from qkdsim.protocol import ProtocolConfig, binary_entropy, rng_stream, tau_n

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"
STILL = DriftProcess(amplitude=0.0)

# reference operating points: per-intensity sifted-Z rates (Hz) and QBERs
# for the two multiplexed modes, plus the total secret-key rates they are
# reported to support at block 1e9
ACTIVE_CFG = ProtocolConfig(mu1=0.31, mu2=0.10, p_mu1=0.8,
                            pz_alice=0.9, pz_bob=0.75, block_size=10**9)
NO_DECOY_CFG = ProtocolConfig(mu1=0.6, mu2=0.2, p_mu1=0.8,
                              pz_alice=0.8, pz_bob=0.5, block_size=10**9)
ACTIVE_TOTAL_BPS = 2.34e6
NO_DECOY_TOTAL_BPS = 2.23e6
RATE_TOLERANCE = 0.30


def _verdict(num, label, ok, elapsed, limit_s, detail):
    line = (f"{'PASS' if ok else 'FAIL'} check {num} ({label}): {detail} "
            f"[{elapsed:.2f} s / limit {limit_s:.0f} s]")
    print(line, file=sys.__stdout__, flush=True)
    return line


def _load(name):
    return Scenario.from_json((SCENARIO_DIR / f"{name}.json").read_text())


def test_check_1_active_decoy_reference_rate():
    t0 = time.perf_counter()
    b1 = tallies_from_rates(ACTIVE_CFG, 1,
                            rate_z_mu1_hz=3.78e6, rate_z_mu2_hz=0.32e6,
                            qber_z_mu1=0.0443, qber_z_mu2=0.0443,
                            qber_x_mu1=0.0214, qber_x_mu2=0.0214, total_z=1e9)
    b2 = tallies_from_rates(ACTIVE_CFG, 2,
                            rate_z_mu1_hz=1.97e6, rate_z_mu2_hz=0.17e6,
                            qber_z_mu1=0.0556, qber_z_mu2=0.0556,
                            qber_x_mu1=0.0214, qber_x_mu2=0.0214, total_z=1e9)
    # mode 2 was measured in the key basis only: shared phase error via donor
    total = secret_key_length(b1).skr + secret_key_length(b2, x_donor=b1).skr
    elapsed = time.perf_counter() - t0
    lo = ACTIVE_TOTAL_BPS * (1.0 - RATE_TOLERANCE)
    hi = ACTIVE_TOTAL_BPS * (1.0 + RATE_TOLERANCE)
    ok = lo <= total <= hi and elapsed < 1.0
    line = _verdict(1, "active-decoy reference rate", ok, elapsed, 1,
                    f"total {total / 1e6:.3f} Mbps vs band "
                    f"[{lo / 1e6:.3f}, {hi / 1e6:.3f}] Mbps")
    assert ok, line


def test_check_2_no_decoy_reference_rate():
    t0 = time.perf_counter()
    c1 = tallies_from_rates(NO_DECOY_CFG, 1,
                            rate_z_mu1_hz=1.73e6, rate_z_mu2_hz=0.25e6,
                            qber_z_mu1=0.013, qber_z_mu2=0.0086,
                            qber_x_mu1=0.027, qber_x_mu2=0.0322, total_z=1e9)
    c2 = tallies_from_rates(NO_DECOY_CFG, 2,
                            rate_z_mu1_hz=2.47e6, rate_z_mu2_hz=0.18e6,
                            qber_z_mu1=0.0435, qber_z_mu2=0.0385,
                            qber_x_mu1=0.027, qber_x_mu2=0.0322, total_z=1e9)
    # both intensities treated as consistently acquired: one block per mode
    total = secret_key_length(c1).skr + secret_key_length(c2, x_donor=c1).skr
    elapsed = time.perf_counter() - t0
    lo = NO_DECOY_TOTAL_BPS * (1.0 - RATE_TOLERANCE)
    hi = NO_DECOY_TOTAL_BPS * (1.0 + RATE_TOLERANCE)
    ok = lo <= total <= hi and elapsed < 1.0
    line = _verdict(2, "no-decoy reference rate", ok, elapsed, 1,
                    f"total {total / 1e6:.3f} Mbps vs band "
                    f"[{lo / 1e6:.3f}, {hi / 1e6:.3f}] Mbps")
    assert ok, line


def test_check_3_acquisition_stabilization_ratio():
    t0 = time.perf_counter()
    active = _load("active_decoy")
    sequential = replace(active, acquisition=Acquisition.SEQUENTIAL,
                         sub_durations=(250.0, 250.0))
    res_i = run_scenario(active)
    res_s = run_scenario(sequential)
    ratios = {m: res_s.aggregates[m].std_skr_bps / res_i.aggregates[m].std_skr_bps
              for m in MODES}
    # the more affected mode carries the larger relative sequential spread
    affected = max(MODES, key=lambda m: res_s.aggregates[m].std_skr_bps
                   / abs(res_s.aggregates[m].mean_skr_bps))
    elapsed = time.perf_counter() - t0
    ok = ratios[affected] >= 5.0 and elapsed < 60.0
    line = _verdict(3, "acquisition stabilization", ok, elapsed, 60,
                    f"sequential/interleaved per-window SKR std ratio "
                    f"{ratios[affected]:.1f} for mode {affected} "
                    f"(all modes: {ratios[1]:.1f}, {ratios[2]:.1f}); need >= 5")
    assert ok, line


def test_check_4_sequential_negative_windows_at_low_qber():
    t0 = time.perf_counter()
    res = run_scenario(_load("no_decoy"))
    affected = max(MODES, key=lambda m: res.aggregates[m].negative_windows)
    agg = res.aggregates[affected]
    elapsed = time.perf_counter() - t0
    ok = (agg.negative_windows >= 1 and agg.pooled_qber_z <= 0.05
          and elapsed < 60.0)
    line = _verdict(4, "sequential negative windows", ok, elapsed, 60,
                    f"mode {affected}: {agg.negative_windows} windows with "
                    f"negative raw key at pooled key-basis QBER "
                    f"{agg.pooled_qber_z:.4f} (need >= 1 at <= 0.05)")
    assert ok, line


def test_check_5_bound_soundness_monte_carlo():
    # with per-repetition failure probability <= 10 eps = 1e-8, a single
    # observed violation in 1000 repetitions convicts the bounds
    t0 = time.perf_counter()
    channels = [
        init_channel(LanternSpec.default_mux(), LanternSpec.default_demux(),
                     loss, STILL, rng_stream(seed, "init"))
        for loss, seed in ((2.0, 1), (5.0, 2), (8.0, 3), (5.0, 4))
    ]
    cfg = ProtocolConfig()
    reps, violations = 1000, 0
    for rep in range(reps):
        mc = run_mc(cfg, channels[rep % len(channels)], ReceiverSpec(),
                    1_000_000, 90_000 + rep)
        for m in MODES:
            d0, d1, phi, _ = decoy_bounds(mc.tallies[m])
            true_phi = mc.true_phase_error(m)
            bad = (d0 > mc.true_vacuum_count(m)
                   or d1 > mc.true_single_count(m)
                   or (not math.isnan(true_phi) and phi < true_phi))
            violations += bad
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and elapsed < 600.0
    line = _verdict(5, "bound soundness", ok, elapsed, 600,
                    f"{violations} bound violations over {reps} per-pulse "
                    f"repetitions x {len(MODES)} modes at 1e6 pulses each")
    assert ok, line


def _random_setup(seed):
    g = np.random.default_rng(seed)
    mu2 = g.uniform(0.08, 0.22)
    cfg = ProtocolConfig(mu1=mu2 + g.uniform(0.15, 0.45), mu2=mu2,
                         p_mu1=g.uniform(0.6, 0.9),
                         pz_alice=g.uniform(0.7, 0.95),
                         pz_bob=float(g.choice([0.5, 0.75, 0.9])))

    def lantern():
        return LanternSpec(tuple(g.uniform(-25.0, -14.0, 3)),
                           tuple(g.uniform(0.0, 2.0, 3)))

    state = init_channel(lantern(), lantern(), g.uniform(1.0, 8.0),
                         STILL, rng_stream(seed, "init"))
    receiver = ReceiverSpec(pz_bob=cfg.pz_bob,
                            interferometer_visibility=g.uniform(0.93, 0.99),
                            extinction_error=g.uniform(0.002, 0.02))
    return cfg, state, receiver


def test_check_6_engine_agreement():
    t0 = time.perf_counter()
    cells = ("n_z_mu1", "m_z_mu1", "n_z_mu2", "m_z_mu2",
             "n_x_mu1", "m_x_mu1", "n_x_mu2", "m_x_mu2")
    n_pulses = 10_000_000
    worst, checked = 0.0, 0
    for seed in range(5):
        cfg, state, receiver = _random_setup(seed)
        duration = n_pulses / cfg.qubit_rate
        mc = run_mc(cfg, state, receiver, n_pulses, 40_000 + seed)
        tr = run_tally(cfg, state, receiver, duration, duration, 50_000 + seed)
        for m in MODES:
            per_pulse, tally = mc.tallies[m], tr.blocks[m][0]
            for cell in cells:
                a, b = getattr(per_pulse, cell), getattr(tally, cell)
                # both draws are binomial with near-equal means, so the
                # difference scale is sqrt of the summed counts
                z = abs(a - b) / math.sqrt(max(a + b, 1.0))
                worst = max(worst, z)
                checked += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 4.0 and elapsed < 300.0
    line = _verdict(6, "engine agreement", ok, elapsed, 300,
                    f"worst |per-pulse - tally| deviation {worst:.2f} sigma "
                    f"over {checked} tally cells (5 random scenarios at "
                    f"1e7 pulses); need <= 4")
    assert ok, line


def test_check_7_loss_sweep_shape():
    t0 = time.perf_counter()
    active = _load("active_decoy")
    losses = [1.0, 2.0, 5.0, 10.0, 15.0, 20.0, 30.0, 40.0]
    points = loss_sweep(active, losses)
    totals = [p.total_skr_bps for p in points]
    monotone = all(a >= b - 1e-9 for a, b in zip(totals, totals[1:]))
    at_5db = next(p.total_skr_bps for p in points if p.loss_db == 5.0)
    operating = sum(run_scenario(active).aggregates[m].mean_skr_bps
                    for m in MODES)
    deviation = abs(at_5db - operating) / operating
    final = next(p.total_skr_bps for p in points if p.loss_db == 40.0)
    elapsed = time.perf_counter() - t0
    ok = (monotone and deviation <= 0.05 and final == 0.0 and elapsed < 30.0)
    line = _verdict(7, "loss sweep", ok, elapsed, 30,
                    f"monotone={monotone}, 5 dB point within "
                    f"{deviation:.2%} of the calibrated operating point "
                    f"(need <= 5%), SKR at 40 dB = {final}")
    assert ok, line


def test_check_8_unit_numerics():
    t0 = time.perf_counter()
    eps = 1e-9
    entropy_ok = (binary_entropy(0.0) == 0.0 and binary_entropy(1.0) == 0.0
                  and binary_entropy(0.5) == 1.0
                  and abs(binary_entropy(0.3) - binary_entropy(0.7)) < 1e-15)
    cfg = ProtocolConfig()
    tau_ok = abs(sum(tau_n(cfg, n) for n in range(60)) - 1.0) < 1e-12
    delta = hoeffding_delta(1e9, eps)
    delta_ref = math.sqrt(1e9 / 2.0 * math.log(1.0 / eps))
    delta_ok = (abs(delta - delta_ref) <= 1e-9 * delta_ref
                and abs(delta / 1.0179e5 - 1.0) < 1e-3)
    d0, d1, phi, lam = 1.1e6, 4.3e8, 0.029, 2.4e8
    got = assemble_key_length(d0, d1, phi, lam, eps, eps)
    want = (d0 + d1 * (1.0 - binary_entropy(phi)) - lam
            - 6.0 * math.log2(21.0 / eps) - 2.0 * math.log2(2.0 / eps))
    assembly_ok = abs(got - want) <= 1e-9 * abs(want)
    elapsed = time.perf_counter() - t0
    ok = (entropy_ok and tau_ok and delta_ok and assembly_ok
          and elapsed < 1.0)
    line = _verdict(8, "unit numerics", ok, elapsed, 1,
                    f"entropy={entropy_ok}, tau normalization={tau_ok}, "
                    f"concentration delta {delta:.4e} (closed form + 1.0179e5 "
                    f"pin)={delta_ok}, key-length assembly={assembly_ok}")
    assert ok, line
