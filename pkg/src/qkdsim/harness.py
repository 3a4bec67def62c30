"""Experiment orchestration: scenarios, acquisition replays, and outputs.

A Scenario bundles everything one run needs (protocol constants, channel
build, receivers, acquisition mode, timing, seed) and serializes to JSON,
so results are reproducible from one file. run_scenario turns it into
windowed tallies and finite-key results; the two acquisition modes differ
only in how the decoy intensity is interleaved with the signal:

  - interleaved: the intensity is drawn per symbol, so both intensities
    sample the channel in the same instants;
  - sequential: one all-signal pass then one all-decoy pass over a single
    continuous drift trajectory. Window j pairs signal statistics from
    pass one with decoy statistics taken a long time later in pass two,
    reproducing the inconsistent channel estimate such an acquisition
    feeds to the decoy bounds. Counts are rescaled to the interleaved
    intensity mix so the two modes are comparable window for window.

Model assumptions:
  - window results use the protocol block size as configured; windows
    whose key-basis counts fall short are evaluated anyway and flagged
  - a receiver with no monitor-basis counts borrows the other mode's
    monitor cells for the phase estimate (both links share one channel)
  - the loss sweep and calibration evaluate the analytic tally model
    averaged over the drift's stationary angle law (and therefore reduce
    to the frozen mean channel when the amplitude is zero), which is what
    a long windowed acquisition converges to

Standard-deviation aggregates are computed on the per-window raw key
rates (negative values kept), since clamping would hide exactly the
instability the windowed analysis is meant to expose.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import least_squares

from qkdsim.channel import (
    ANGLE_SCALES,
    ChannelState,
    DriftProcess,
    LanternSpec,
    channel_at,
    init_channel,
    step_drift,
)
from qkdsim.keyrate import KeyRateResult, TallyBlock, secret_key_length
from qkdsim.link import (
    MODES,
    ModeProbs,
    ReceiverSpec,
    run_mc,
    run_tally,
    window_probabilities,
)
from qkdsim.protocol import (
    Intensity,
    ProtocolConfig,
    rng_stream,
    validate_config,
)

__all__ = [
    "HarnessError",
    "CalibrationError",
    "OutputError",
    "Acquisition",
    "EngineKind",
    "Scenario",
    "WindowRecord",
    "ModeAggregate",
    "WindowedResult",
    "SweepPoint",
    "run_scenario",
    "window_trajectory",
    "calibrate",
    "loss_sweep",
    "emit_outputs",
    "mean_channel_state",
    "expected_mode_probs",
    "expected_block",
]

WINDOW_CSV_COLUMNS = (
    "window_start_s", "mode",
    "n_z_mu1", "n_z_mu2", "m_z_mu1", "m_z_mu2",
    "n_x_mu1", "n_x_mu2", "m_x_mu1", "m_x_mu2",
    "qber_z", "qber_x", "d0", "d1", "phi_z", "skl_raw_bits", "skr_bps",
)
SWEEP_CSV_COLUMNS = ("loss_db", "skr_mode1_bps", "skr_mode2_bps",
                     "skr_total_bps")


class HarnessError(ValueError):
    """Raised for invalid scenarios or orchestration inputs."""


class CalibrationError(HarnessError):
    """Raised when a calibration fit cannot meet its targets."""


class OutputError(HarnessError):
    """Raised when writing result files fails; carries the path."""


class Acquisition(Enum):
    INTERLEAVED = "interleaved"
    SEQUENTIAL = "sequential"


class EngineKind(Enum):
    TALLY = "tally"
    PER_PULSE = "per_pulse"


@dataclass(frozen=True, slots=True)
class Scenario:
    """One reproducible experiment description."""

    protocol: ProtocolConfig
    mux: LanternSpec
    demux: LanternSpec
    fiber_loss_db: float
    drift: DriftProcess
    receivers: tuple[ReceiverSpec, ReceiverSpec]
    acquisition: Acquisition
    duration: float
    window: float = 50.0
    engine: EngineKind = EngineKind.TALLY
    seed: int = 0
    sub_durations: Optional[tuple[float, float]] = None

    def __post_init__(self):
        object.__setattr__(self, "receivers", tuple(self.receivers))
        if self.sub_durations is not None:
            object.__setattr__(self, "sub_durations",
                               tuple(self.sub_durations))
        v = []
        if self.fiber_loss_db < 0:
            v.append(f"fiber_loss_db must be >= 0, got {self.fiber_loss_db}")
        if len(self.receivers) != 2:
            v.append("receivers needs exactly one ReceiverSpec per mode")
        if self.duration <= 0 or self.window <= 0:
            v.append("duration and window must be > 0")
        else:
            n = self.duration / self.window
            if abs(n - round(n)) > 1e-9:
                v.append(f"window {self.window} must divide "
                         f"duration {self.duration}")
        if self.sub_durations is not None:
            if self.acquisition is not Acquisition.SEQUENTIAL:
                v.append("sub_durations applies to sequential acquisition only")
            elif len(self.sub_durations) != 2 or min(self.sub_durations) <= 0:
                v.append("sub_durations needs two positive entries")
            elif abs(sum(self.sub_durations) - self.duration) > 1e-9:
                v.append("sub_durations must sum to duration")
        if v:
            raise HarnessError("; ".join(v))

    @property
    def n_windows(self) -> int:
        return int(round(self.duration / self.window))

    def pass_durations(self) -> tuple[float, float]:
        """Per-intensity acquisition time for sequential mode."""
        if self.sub_durations is not None:
            return self.sub_durations
        return (0.5 * self.duration, 0.5 * self.duration)

    def to_dict(self) -> dict:
        return {
            "protocol": json.loads(self.protocol.to_json()),
            "mux": self.mux.to_dict(),
            "demux": self.demux.to_dict(),
            "fiber_loss_db": self.fiber_loss_db,
            "drift": self.drift.to_dict(),
            "receivers": [r.to_dict() for r in self.receivers],
            "acquisition": self.acquisition.value,
            "duration": self.duration,
            "window": self.window,
            "engine": self.engine.value,
            "seed": self.seed,
            "sub_durations": (list(self.sub_durations)
                              if self.sub_durations is not None else None),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        """Short content hash for provenance stamps on derived artifacts."""
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise HarnessError(f"unknown Scenario fields: {unknown}")
        d = dict(data)
        try:
            d["protocol"] = ProtocolConfig.from_dict(d["protocol"])
            d["mux"] = LanternSpec.from_dict(d["mux"])
            d["demux"] = LanternSpec.from_dict(d["demux"])
            d["drift"] = DriftProcess.from_dict(d["drift"])
            d["receivers"] = tuple(ReceiverSpec.from_dict(r)
                                   for r in d["receivers"])
            d["acquisition"] = Acquisition(d["acquisition"])
            if "engine" in d:
                d["engine"] = EngineKind(d["engine"])
            if d.get("sub_durations") is not None:
                d["sub_durations"] = tuple(d["sub_durations"])
        except KeyError as exc:
            raise HarnessError(f"missing Scenario field: {exc}") from exc
        try:
            return cls(**d)
        except TypeError as exc:
            raise HarnessError(f"incomplete Scenario: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, slots=True)
class WindowRecord:
    """One analysis window of one mode."""

    start_s: float
    mode: int
    block: TallyBlock
    result: KeyRateResult

    def csv_row(self) -> list:
        b, r = self.block, self.result
        qber_z = b.m_z / b.n_z if b.n_z > 0 else float("nan")
        qber_x = b.m_x / b.n_x if b.n_x > 0 else float("nan")
        return [self.start_s, self.mode,
                b.n_z_mu1, b.n_z_mu2, b.m_z_mu1, b.m_z_mu2,
                b.n_x_mu1, b.n_x_mu2, b.m_x_mu1, b.m_x_mu2,
                qber_z, qber_x, r.d0, r.d1, r.phi_z,
                r.secret_key_length_raw, r.skr]


@dataclass(frozen=True, slots=True)
class ModeAggregate:
    """Whole-run statistics for one mode."""

    mode: int
    windows: int
    total_secret_bits: float
    mean_skr_bps: float
    std_skr_bps: float              # sample std of per-window raw rates
    negative_windows: int
    infeasible_windows: int
    short_windows: int
    pooled_qber_z: Optional[float]
    pooled_qber_x: Optional[float]

    def to_dict(self) -> dict:
        # summary.json stays strict JSON: non-finite values become null
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, float) and not np.isfinite(value):
                value = None
            out[f.name] = value
        return out


@dataclass(frozen=True, slots=True)
class WindowedResult:
    """Windowed tallies, per-window key rates, and their aggregates."""

    scenario: Scenario
    windows: tuple[WindowRecord, ...]
    aggregates: dict[int, ModeAggregate]
    total_skr_bps: float
    std_total_skr_bps: float

    def raw_skr_series(self, mode: int) -> list[float]:
        return [w.result.secret_key_length_raw / w.block.duration
                for w in self.windows if w.mode == mode]

    def summary_dict(self) -> dict:
        return {
            "scenario_digest": self.scenario.digest(),
            "seed": self.scenario.seed,
            "acquisition": self.scenario.acquisition.value,
            "duration_s": self.scenario.duration,
            "window_s": self.scenario.window,
            "block_size": self.scenario.protocol.block_size,
            "modes": {str(m): agg.to_dict()
                      for m, agg in sorted(self.aggregates.items())},
            "total_skr_bps": self.total_skr_bps,
            "std_total_skr_bps": self.std_total_skr_bps,
        }


def _sample_std(series: Sequence[float]) -> float:
    if len(series) < 2:
        return 0.0
    return float(np.std(np.asarray(series, dtype=float), ddof=1))


def _mode_aggregate(mode: int, records: list[WindowRecord],
                    duration: float) -> ModeAggregate:
    raw = [w.result.secret_key_length_raw / w.block.duration for w in records]
    n_z = sum(w.block.n_z for w in records)
    m_z = sum(w.block.m_z for w in records)
    n_x = sum(w.block.n_x for w in records)
    m_x = sum(w.block.m_x for w in records)
    return ModeAggregate(
        mode=mode,
        windows=len(records),
        total_secret_bits=sum(w.result.secret_key_length for w in records),
        mean_skr_bps=sum(w.result.secret_key_length for w in records)
        / duration,
        std_skr_bps=_sample_std(raw),
        negative_windows=sum(w.result.secret_key_length_raw < 0
                             for w in records),
        infeasible_windows=sum(w.result.infeasible for w in records),
        short_windows=sum(w.result.short_block for w in records),
        pooled_qber_z=m_z / n_z if n_z > 0 else None,
        pooled_qber_x=m_x / n_x if n_x > 0 else None,
    )


def _tkey(t: float) -> float:
    return round(t, 12)


def window_trajectory(s: Scenario, state: Optional[ChannelState] = None,
                      ) -> dict[float, ChannelState]:
    """One drift trajectory, frozen at every window midpoint either
    acquisition schedule could ask for.

    The sample times are the union of the interleaved midpoints and both
    sequential pass midpoints, so the path is a function of the scenario's
    seed and timing alone: flipping the acquisition mode replays exactly
    the same channel history, which is what makes windowed spreads of the
    two schedules directly comparable.
    """
    if state is None:
        state = init_channel(s.mux, s.demux, s.fiber_loss_db, s.drift,
                             rng_stream(s.seed, "channel/init"))
    n = s.n_windows
    sub1, sub2 = s.pass_durations()
    len1, len2 = sub1 / n, sub2 / n
    times: set[float] = set()
    for j in range(n):
        times.add(_tkey((j + 0.5) * s.window))
        times.add(_tkey((j + 0.5) * len1))
        times.add(_tkey(sub1 + (j + 0.5) * len2))
    g = rng_stream(s.seed, s.drift.seed_stream)
    path: dict[float, ChannelState] = {}
    t_prev = 0.0
    for t in sorted(times):
        state = step_drift(state, t - t_prev, g)
        t_prev = t
        path[t] = state
    return path


def _acquire_interleaved(s: Scenario, state: ChannelState,
                         path: Optional[dict[float, ChannelState]],
                         ) -> dict[int, list[TallyBlock]]:
    if s.engine is EngineKind.TALLY:
        mids = [path[_tkey((j + 0.5) * s.window)] for j in range(s.n_windows)]
        tr = run_tally(s.protocol, state, s.receivers, s.duration, s.window,
                       rng_stream(s.seed, "acquire"), window_states=mids)
        return tr.blocks
    blocks: dict[int, list[TallyBlock]] = {m: [] for m in MODES}
    pulses = int(round(s.window * s.protocol.qubit_rate))
    for j in range(s.n_windows):
        mc = run_mc(s.protocol, state, s.receivers, pulses,
                    rng_stream(s.seed, f"acquire/{j}"))
        state = mc.final_state
        for m in MODES:
            blocks[m].append(mc.tallies[m])
    return blocks


def _acquire_pass(s: Scenario, state: ChannelState, sub: float,
                  pass_window: float, fixed: Intensity, label: str,
                  path: Optional[dict[float, ChannelState]], offset: float,
                  ) -> tuple[dict[int, list[TallyBlock]], ChannelState]:
    if s.engine is EngineKind.TALLY:
        mids = [path[_tkey(offset + (j + 0.5) * pass_window)]
                for j in range(int(round(sub / pass_window)))]
        tr = run_tally(s.protocol, state, s.receivers, sub, pass_window,
                       rng_stream(s.seed, label), intensity_fixed=fixed,
                       window_states=mids)
        return tr.blocks, tr.final_state
    blocks: dict[int, list[TallyBlock]] = {m: [] for m in MODES}
    pulses = int(round(pass_window * s.protocol.qubit_rate))
    for j in range(int(round(sub / pass_window))):
        mc = run_mc(s.protocol, state, s.receivers, pulses,
                    rng_stream(s.seed, f"{label}/{j}"),
                    intensity_fixed=fixed)
        state = mc.final_state
        for m in MODES:
            blocks[m].append(mc.tallies[m])
    return blocks, state


def _acquire_sequential(s: Scenario, state: ChannelState,
                        path: Optional[dict[float, ChannelState]],
                        ) -> dict[int, list[TallyBlock]]:
    cfg = s.protocol
    sub1, sub2 = s.pass_durations()
    n = s.n_windows
    len1, len2 = sub1 / n, sub2 / n
    blocks1, state = _acquire_pass(s, state, sub1, len1, Intensity.SIGNAL,
                                   "acquire/signal", path, 0.0)
    blocks2, _ = _acquire_pass(s, state, sub2, len2, Intensity.DECOY,
                               "acquire/decoy", path, sub1)
    # rescale each pass to the share an interleaved window would give that
    # intensity, so windows are comparable across acquisition modes
    scale1 = cfg.p_mu1 * s.window / len1
    scale2 = cfg.p_mu2 * s.window / len2
    merged: dict[int, list[TallyBlock]] = {m: [] for m in MODES}
    for m in MODES:
        for a, b in zip(blocks1[m], blocks2[m]):
            merged[m].append(TallyBlock(
                n_z_mu1=a.n_z_mu1 * scale1, m_z_mu1=a.m_z_mu1 * scale1,
                n_x_mu1=a.n_x_mu1 * scale1, m_x_mu1=a.m_x_mu1 * scale1,
                n_z_mu2=b.n_z_mu2 * scale2, m_z_mu2=b.m_z_mu2 * scale2,
                n_x_mu2=b.n_x_mu2 * scale2, m_x_mu2=b.m_x_mu2 * scale2,
                duration=s.window, mode=m, cfg=cfg))
    return merged


def run_scenario(s: Scenario) -> WindowedResult:
    """Acquire, window, and evaluate one scenario end to end."""
    validate_config(s.protocol)
    state = init_channel(s.mux, s.demux, s.fiber_loss_db, s.drift,
                         rng_stream(s.seed, "channel/init"))
    path = (window_trajectory(s, state)
            if s.engine is EngineKind.TALLY else None)
    if s.acquisition is Acquisition.INTERLEAVED:
        blocks = _acquire_interleaved(s, state, path)
    else:
        blocks = _acquire_sequential(s, state, path)

    windows: list[WindowRecord] = []
    for j in range(s.n_windows):
        per_mode = {m: blocks[m][j] for m in MODES}
        for m in MODES:
            other = per_mode[MODES[0] + MODES[1] - m]
            donor = other if per_mode[m].n_x == 0 and other.n_x > 0 else None
            res = secret_key_length(per_mode[m], x_donor=donor)
            windows.append(WindowRecord(start_s=j * s.window, mode=m,
                                        block=per_mode[m], result=res))

    aggregates = {
        m: _mode_aggregate(m, [w for w in windows if w.mode == m],
                           s.duration)
        for m in MODES}
    total_series = [
        sum(w.result.secret_key_length_raw / w.block.duration
            for w in windows if w.start_s == j * s.window)
        for j in range(s.n_windows)]
    return WindowedResult(
        scenario=s, windows=tuple(windows), aggregates=aggregates,
        total_skr_bps=sum(a.mean_skr_bps for a in aggregates.values()),
        std_total_skr_bps=_sample_std(total_series))


def mean_channel_state(s: Scenario,
                       fiber_loss_db: Optional[float] = None) -> ChannelState:
    """The drift-free channel: every drift angle frozen at its mean."""
    still = replace(s.drift, amplitude=0.0)
    return channel_at(s.mux, s.demux,
                      s.fiber_loss_db if fiber_loss_db is None
                      else fiber_loss_db,
                      still, (0.0, 0.0, 0.0, 0.0))


def _stationary_grid(drift: DriftProcess, nodes: int,
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Hermite grid (points, weights) over the stationary angle law."""
    axes = []
    for scale in ANGLE_SCALES:
        sigma = drift.amplitude * scale
        if sigma == 0.0:
            axes.append((np.array([0.0]), np.array([1.0])))
        else:
            x, w = np.polynomial.hermite_e.hermegauss(nodes)
            axes.append((x * sigma, w / w.sum()))
    mesh = np.meshgrid(*[a[0] for a in axes], indexing="ij")
    weights = np.ones(mesh[0].shape)
    for axis, (_, w) in enumerate(axes):
        shape = [1, 1, 1, 1]
        shape[axis] = -1
        weights = weights * w.reshape(shape)
    points = np.stack([g.ravel() for g in mesh], axis=1)
    return points, weights.ravel()


def expected_mode_probs(cfg: ProtocolConfig, mux: LanternSpec,
                        demux: LanternSpec, fiber_loss_db: float,
                        drift: DriftProcess, receivers,
                        nodes: int = 3) -> dict[int, ModeProbs]:
    """Per-pulse detection probabilities averaged over the stationary drift.

    The dead-time factor is folded into the returned probabilities (click
    holds E[click * u], u is set to 1), since the average of per-window
    expected counts is the average of that product, not the product of the
    averages. With drift amplitude zero this is exactly the frozen mean
    channel.
    """
    points, weights = _stationary_grid(drift, nodes)
    acc = {m: [np.zeros((2, 2)), np.zeros((2, 2)), np.zeros(2)]
           for m in MODES}
    for angles, w in zip(points, weights):
        state = channel_at(mux, demux, fiber_loss_db, drift, angles)
        probs = window_probabilities(cfg, state, receivers)
        for m in MODES:
            mp = probs[m]
            acc[m][0] += w * mp.click * mp.u[:, None]
            acc[m][1] += w * mp.err_and_click * mp.u[:, None]
            acc[m][2] += w * mp.load
    return {m: ModeProbs(click=c, err_and_click=e, load=ld, u=np.ones(2))
            for m, (c, e, ld) in acc.items()}


def _expected_cells(cfg: ProtocolConfig, mp: ModeProbs, slots: float,
                    ) -> dict[tuple[int, int], tuple[float, float]]:
    pa = (cfg.pz_alice, cfg.px_alice)
    pk = (cfg.p_mu1, cfg.p_mu2)
    out = {}
    for b in (0, 1):
        for k in (0, 1):
            n_cat = slots * pa[b] * pk[k]
            out[(b, k)] = (n_cat * mp.click[b, k] * mp.u[b],
                           n_cat * mp.err_and_click[b, k] * mp.u[b])
    return out


def expected_block(cfg: ProtocolConfig, mp: ModeProbs, mode: int,
                   duration: float) -> TallyBlock:
    """Analytic expected tallies for one mode from its click probabilities."""
    cells = _expected_cells(cfg, mp, duration * cfg.qubit_rate)
    return TallyBlock(
        n_z_mu1=cells[(0, 0)][0], m_z_mu1=cells[(0, 0)][1],
        n_z_mu2=cells[(0, 1)][0], m_z_mu2=cells[(0, 1)][1],
        n_x_mu1=cells[(1, 0)][0], m_x_mu1=cells[(1, 0)][1],
        n_x_mu2=cells[(1, 1)][0], m_x_mu2=cells[(1, 1)][1],
        duration=duration, mode=mode, cfg=cfg)


@dataclass(frozen=True, slots=True)
class SweepPoint:
    loss_db: float
    skr_by_mode: dict[int, float]
    total_skr_bps: float

    def csv_row(self) -> list:
        return [self.loss_db, self.skr_by_mode[1], self.skr_by_mode[2],
                self.total_skr_bps]


def _sweep_point(s: Scenario, loss_db: float) -> SweepPoint:
    probs = expected_mode_probs(s.protocol, s.mux, s.demux, loss_db,
                                s.drift, s.receivers)
    blocks = {m: expected_block(s.protocol, probs[m], m, s.window)
              for m in MODES}
    skr = {}
    for m in MODES:
        other = blocks[MODES[0] + MODES[1] - m]
        donor = other if blocks[m].n_x == 0 and other.n_x > 0 else None
        skr[m] = secret_key_length(blocks[m], x_donor=donor).skr
    return SweepPoint(loss_db=loss_db, skr_by_mode=skr,
                      total_skr_bps=sum(skr.values()))


def loss_sweep(s: Scenario, losses: Sequence[float]) -> list[SweepPoint]:
    """Analytic key rate at the mean channel across fiber losses."""
    losses = list(losses)
    if not losses:
        raise HarnessError("losses must be non-empty")
    if any(loss < 0 for loss in losses):
        raise HarnessError("losses must be >= 0 dB")
    env = os.environ.get("QKDSIM_THREADS", "").strip()
    workers = int(env) if env else min(8, os.cpu_count() or 1)
    workers = max(1, min(workers, len(losses)))
    if workers == 1:
        return [_sweep_point(s, loss) for loss in losses]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda loss: _sweep_point(s, loss), losses))


_CAL_TARGET_KEYS = ("rate_z_mu1_hz", "rate_z_mu2_hz", "qber_z", "qber_x",
                    "qber_z_std")


def _model_observables(cfg: ProtocolConfig, probs: dict[int, ModeProbs],
                       ) -> dict[int, dict[str, float]]:
    pk = np.array([cfg.p_mu1, cfg.p_mu2])
    out = {}
    for m in MODES:
        mp = probs[m]
        rates = cfg.qubit_rate * cfg.pz_alice * pk * mp.click[0] * mp.u[0]
        obs = {"rate_z_mu1_hz": float(rates[0]),
               "rate_z_mu2_hz": float(rates[1]),
               "qber_z": float(np.dot(pk, mp.err_and_click[0])
                               / np.dot(pk, mp.click[0]))}
        x_click = float(np.dot(pk, mp.click[1]))
        obs["qber_x"] = (float(np.dot(pk, mp.err_and_click[1]) / x_click)
                         if x_click > 0 else float("nan"))
        out[m] = obs
    return out


def _qber_z_std(cfg: ProtocolConfig, scenario: Scenario,
                nodes: int = 3) -> dict[int, float]:
    """Stationary spread of the windowed key-basis error rate per mode.

    A window short against the drift correlation time sees one frozen
    channel, so the window-to-window error-rate spread is the standard
    deviation of the instantaneous rate under the stationary angle law.
    This is the observable that pins the drift amplitude.
    """
    points, weights = _stationary_grid(scenario.drift, nodes)
    pk = np.array([cfg.p_mu1, cfg.p_mu2])
    first = {m: 0.0 for m in MODES}
    second = {m: 0.0 for m in MODES}
    for angles, w in zip(points, weights):
        state = channel_at(scenario.mux, scenario.demux,
                           scenario.fiber_loss_db, scenario.drift, angles)
        probs = window_probabilities(cfg, state, scenario.receivers)
        for m in MODES:
            mp = probs[m]
            q = float(np.dot(pk, mp.err_and_click[0])
                      / np.dot(pk, mp.click[0]))
            first[m] += w * q
            second[m] += w * q * q
    return {m: float(np.sqrt(max(second[m] - first[m] ** 2, 0.0)))
            for m in MODES}


def _split_insertion_loss(total_db: float, launch_db: float,
                          ) -> tuple[float, float]:
    """Split a port's total insertion loss between mux and demux sides.

    The split is the identifiable parameterization: detection rates see
    only the total, while the inter-mode error gap sees only the launch
    side (a strong launch leaks more crosstalk into the other port).
    """
    launch = min(max(launch_db, 0.0), total_db)
    return launch, total_db - launch


def calibrate(targets: dict, template: Scenario,
              ) -> tuple[Scenario, dict]:
    """Fit hardware unknowns so model observables match targets.

    Free parameters: per-mode total insertion loss, the launch-power
    imbalance between the two transmitters, the shared extinction error,
    the shared interferometer visibility, and the drift amplitude. That
    set is exactly what the observables determine: rates fix the totals,
    the inter-mode error gap fixes the imbalance, and the drift amplitude
    enters through the stationary averaging of the expected tallies.

    targets = {"fiber_loss_db": float, "modes": {"1": {...}, "2": {...}}}
    with per-mode entries among rate_z_mu1_hz, rate_z_mu2_hz, qber_z,
    qber_x, and qber_z_std (the window-to-window error-rate spread, the
    one entry sensitive to the drift amplitude).

    Malformed targets (unknown names, non-positive values) raise
    HarnessError; targets no channel can meet, whether detectably
    (a rate above the source rate) or by fit residuals above 10%,
    raise CalibrationError.
    """
    cfg = template.protocol
    if "modes" not in targets or not targets["modes"]:
        raise HarnessError("targets must provide a modes table")
    loss_db = float(targets.get("fiber_loss_db", template.fiber_loss_db))
    wanted: list[tuple[int, str, float]] = []
    for mode_key, table in sorted(targets["modes"].items()):
        m = int(mode_key)
        if m not in MODES:
            raise HarnessError(f"unknown mode {mode_key} in targets")
        for name, value in table.items():
            if name not in _CAL_TARGET_KEYS:
                raise HarnessError(f"unknown target {name!r}")
            if value is None:
                continue
            if value <= 0:
                raise HarnessError(f"target {name} must be > 0")
            if name.startswith("rate") and value >= cfg.qubit_rate:
                raise CalibrationError(
                    f"target {name}={value} exceeds the source rate")
            wanted.append((m, name, float(value)))
    if not wanted:
        raise HarnessError("targets contain no usable entries")

    def build(x):
        total1, total2, imbalance, ext, one_minus_v, amplitude = x
        launch1, drop1 = _split_insertion_loss(total1, -imbalance)
        launch2, drop2 = _split_insertion_loss(total2, imbalance)
        mux = replace(template.mux,
                      insertion_loss_db=(template.mux.insertion_loss_db[0],
                                         launch1, launch2))
        demux = replace(template.demux,
                        insertion_loss_db=(template.demux.insertion_loss_db[0],
                                           drop1, drop2))
        receivers = tuple(replace(r, extinction_error=ext,
                                  interferometer_visibility=1.0 - one_minus_v)
                          for r in template.receivers)
        drift = replace(template.drift, amplitude=float(amplitude))
        return replace(template, mux=mux, demux=demux, receivers=receivers,
                       drift=drift, fiber_loss_db=loss_db)

    want_std = any(name == "qber_z_std" for _, name, _ in wanted)

    def residuals(x):
        scenario = build(x)
        probs = expected_mode_probs(cfg, scenario.mux, scenario.demux,
                                    scenario.fiber_loss_db, scenario.drift,
                                    scenario.receivers)
        obs = _model_observables(cfg, probs)
        if want_std:
            for m, std in _qber_z_std(cfg, scenario).items():
                obs[m]["qber_z_std"] = std
        return [(obs[m][name] - value) / value for m, name, value in wanted]

    x0 = np.array([
        template.mux.insertion_loss_db[1] + template.demux.insertion_loss_db[1],
        template.mux.insertion_loss_db[2] + template.demux.insertion_loss_db[2],
        template.mux.insertion_loss_db[2] - template.mux.insertion_loss_db[1],
        template.receivers[0].extinction_error,
        1.0 - template.receivers[0].interferometer_visibility,
        template.drift.amplitude,
    ])
    lower = [0.0, 0.0, -20.0, 1e-6, 1e-6, 0.0]
    upper = [40.0, 40.0, 20.0, 0.4, 0.6, 0.5]
    x0 = np.clip(x0, lower, upper)
    fit = least_squares(residuals, x0, bounds=(lower, upper), max_nfev=400)
    if not fit.success:
        raise CalibrationError(f"calibration did not converge: {fit.message}")
    res = residuals(fit.x)
    report = {f"mode{m}.{name}": float(r)
              for (m, name, _), r in zip(wanted, res)}
    report["fiber_loss_db"] = 0.0    # pinned to the targeted channel loss
    worst = max(abs(r) for r in report.values())
    diagnostics = {
        "residuals": report,
        "worst_residual": worst,
        "params": {
            "total_insertion_loss_db": [float(fit.x[0]), float(fit.x[1])],
            "launch_imbalance_db": float(fit.x[2]),
            "extinction_error": float(fit.x[3]),
            "interferometer_visibility": float(1.0 - fit.x[4]),
            "drift_amplitude": float(fit.x[5]),
        },
        "cost": float(fit.cost),
        "nfev": int(fit.nfev),
    }
    if worst > 0.10:
        raise CalibrationError(
            "calibration residuals exceed 10%: "
            + json.dumps(report, sort_keys=True))
    return build(fit.x), diagnostics


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _atomic_write(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    try:
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", newline="") as handle:
                handle.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise OutputError(f"failed writing {path}: {exc}") from exc


def _csv_text(columns: Sequence[str], rows: Sequence[Sequence]) -> str:
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_format_cell(v) for v in row])
    return buf.getvalue()


def emit_outputs(result: WindowedResult, out_dir: str,
                 sweep: Optional[Sequence[SweepPoint]] = None) -> dict:
    """Write windows.csv, summary.json, and optionally sweep.csv."""
    paths = {"windows_csv": os.path.join(out_dir, "windows.csv"),
             "summary_json": os.path.join(out_dir, "summary.json")}
    _atomic_write(paths["windows_csv"],
                  _csv_text(WINDOW_CSV_COLUMNS,
                            [w.csv_row() for w in result.windows]))
    _atomic_write(paths["summary_json"],
                  json.dumps(result.summary_dict(), indent=2, sort_keys=True)
                  + "\n")
    if sweep is not None:
        paths["sweep_csv"] = os.path.join(out_dir, "sweep.csv")
        _atomic_write(paths["sweep_csv"],
                      _csv_text(SWEEP_CSV_COLUMNS,
                                [p.csv_row() for p in sweep]))
    return paths
