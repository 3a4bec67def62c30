"""Transmitters, propagation, and receivers for the two multiplexed links.

Two engines produce detection statistics from the same per-slot probability
model, so their outputs agree in distribution:

  - run_mc: per-pulse Monte Carlo over every slot, with photon-number
    draws, port routing, per-detector dead-time scans, and ground truth;
  - run_tally: window-level engine that freezes the channel mid-window,
    computes the per-slot click and error probabilities analytically, and
    draws aggregate counts, enabling replays of hundreds of seconds.

Model assumptions, stated once here:
  - both transmitters fire every slot; the two symbol streams are mutually
    independent, so a photon leaking from the other mode carries no
    correlation with the victim's pattern and errs half the time
  - within one slot the sources competing for a detector are attributed
    with fixed priority own > crosstalk > dark
  - passive basis choice: each arriving photon routes to the key or
    monitor measurement independently, so one slot can click in both bases
  - detector dead time quantizes to whole slots in the slot engines: a
    click blocks the next ceil(dead_time * qubit_rate) - 1 slots, the
    smallest whole-slot blocking that never violates the stated dead time;
    the stream-level detector_process applies the exact continuous value
  - dark counts are slot-synchronous in the slot engines and continuous in
    detector_process; at 50/s against 1.25e9 slots/s the difference is far
    below counting noise
  - a measurement arm the receiver never routes to (basis probability or
    efficiency of zero) has no detector installed, so it produces no
    counts at all, dark counts included; a key-basis-only receiver then
    reports exactly zero monitor counts and borrows a donor's monitor
    statistics downstream
  - timestamps encode the time bin: late-bin clicks sit 400 ps into the
    slot, monitor-basis clicks 200 ps

Randomness comes from labelled substreams of one root seed, so any slice
of a run (the symbol streams in particular) can be regenerated lazily
instead of being stored.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from qkdsim.channel import ChannelState, step_drift
from qkdsim.kernels import dead_time_scan
from qkdsim.keyrate import TallyBlock
from qkdsim.protocol import (
    Basis,
    Intensity,
    ProtocolConfig,
    StateSymbol,
    rng_stream,
    validate_config,
)

__all__ = [
    "LinkError",
    "EngineCapacityError",
    "DetectorSpec",
    "ReceiverSpec",
    "PulseRecord",
    "DetectionRecord",
    "MODES",
    "MAX_MC_PULSES",
    "blocked_slots",
    "generate_symbols",
    "symbol_arrays",
    "simulate_pulse",
    "detector_process",
    "window_probabilities",
    "ModeProbs",
    "McRun",
    "run_mc",
    "TallyRun",
    "run_tally",
]

MODES = (1, 2)              # receive ports of the two key-carrying modes
MAX_MC_PULSES = 100_000_000
_FAR_PAST = np.int64(-1 << 62)


class LinkError(ValueError):
    """Raised for invalid link-simulation inputs."""


class EngineCapacityError(LinkError):
    """Raised when a request exceeds a declared engine limit."""


@dataclass(frozen=True, slots=True)
class DetectorSpec:
    """Single-photon detector figures of merit."""

    efficiency: float = 0.83
    dark_rate: float = 50.0
    dead_time: float = 33e-9
    timestamp_resolution: float = 1e-12

    def __post_init__(self):
        v = []
        if not 0.0 <= self.efficiency <= 1.0:
            v.append(f"efficiency must lie in [0,1], got {self.efficiency}")
        if self.dark_rate < 0.0:
            v.append(f"dark_rate must be >= 0, got {self.dark_rate}")
        if self.dead_time < 0.0:
            v.append(f"dead_time must be >= 0, got {self.dead_time}")
        if not self.timestamp_resolution > 0.0:
            v.append("timestamp_resolution must be > 0, "
                     f"got {self.timestamp_resolution}")
        if v:
            raise LinkError("; ".join(v))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "DetectorSpec":
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise LinkError(f"unknown DetectorSpec fields: {unknown}")
        return cls(**data)


@dataclass(frozen=True, slots=True)
class ReceiverSpec:
    """One mode's receiver: basis splitter, interferometer, detector pair.

    pz_bob = 1 describes a receiver that measures only in the key basis;
    its monitor cells then stay empty and the key-rate layer must borrow
    phase statistics from a donor mode.
    """

    pz_bob: float = 0.75
    interferometer_visibility: float = 0.957
    extinction_error: float = 0.0086
    detectors: tuple[DetectorSpec, DetectorSpec] = (DetectorSpec(), DetectorSpec())

    def __post_init__(self):
        v = []
        if not 0.0 <= self.pz_bob <= 1.0:
            v.append(f"pz_bob must lie in [0,1], got {self.pz_bob}")
        if not 0.0 <= self.interferometer_visibility <= 1.0:
            v.append("interferometer_visibility must lie in [0,1], "
                     f"got {self.interferometer_visibility}")
        if not 0.0 <= self.extinction_error <= 0.5:
            v.append("extinction_error must lie in [0,0.5], "
                     f"got {self.extinction_error}")
        if len(self.detectors) != 2:
            v.append("detectors needs exactly one DetectorSpec per basis")
        if v:
            raise LinkError("; ".join(v))

    def detector(self, basis: Basis) -> DetectorSpec:
        return self.detectors[int(basis)]

    def basis_prob(self, basis: Basis) -> float:
        return self.pz_bob if basis is Basis.Z else 1.0 - self.pz_bob

    def error_prob(self, basis: Basis) -> float:
        """Intrinsic wrong-outcome probability for a correctly based photon."""
        if basis is Basis.Z:
            return self.extinction_error
        return 0.5 * (1.0 - self.interferometer_visibility)

    def to_dict(self) -> dict:
        return {
            "pz_bob": self.pz_bob,
            "interferometer_visibility": self.interferometer_visibility,
            "extinction_error": self.extinction_error,
            "detectors": [d.to_dict() for d in self.detectors],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ReceiverSpec":
        unknown = sorted(set(data) - {f.name for f in fields(cls)})
        if unknown:
            raise LinkError(f"unknown ReceiverSpec fields: {unknown}")
        kwargs = dict(data)
        if "detectors" in kwargs:
            kwargs["detectors"] = tuple(DetectorSpec.from_dict(d)
                                        for d in kwargs["detectors"])
        return cls(**kwargs)


@dataclass(frozen=True, slots=True)
class PulseRecord:
    """Ground truth for one emitted pulse."""

    index: int
    mode: int
    symbol: StateSymbol
    mean_photon_number: float


@dataclass(frozen=True, slots=True)
class DetectionRecord:
    """One accepted click, as the receiver electronics would log it."""

    pulse_index: int
    basis: Basis
    outcome: int
    timestamp_ps: int
    receive_port: int = 0
    is_dark: bool = False

    @property
    def timestamp(self) -> float:
        return self.timestamp_ps * 1e-12


def blocked_slots(dead_time: float, qubit_rate: float) -> int:
    """Slots disabled after a click: smallest count honoring the dead time."""
    return max(int(math.ceil(dead_time * qubit_rate)) - 1, 0)


def _bin_offset_ps(basis: Basis, outcome: int) -> int:
    if basis is Basis.Z:
        return 400 * outcome
    return 200


def _event_timestamp_ps(slot: int, basis: Basis, outcome: int,
                        qubit_rate: float) -> int:
    return int(round(slot * 1e12 / qubit_rate)) + _bin_offset_ps(basis, outcome)


def _receiver_pair(receiver) -> tuple[ReceiverSpec, ReceiverSpec]:
    if isinstance(receiver, ReceiverSpec):
        return (receiver, receiver)
    pair = tuple(receiver)
    if len(pair) != 2 or not all(isinstance(r, ReceiverSpec) for r in pair):
        raise LinkError("receiver must be one ReceiverSpec or one per mode")
    return pair


def symbol_arrays(cfg: ProtocolConfig, count: int, rng: np.random.Generator,
                  intensity_fixed: Optional[Intensity] = None,
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(basis, intensity, z_bit) as uint8 arrays; the vectorized transmitter.

    The draw order (basis block, bit block, intensity block) is part of the
    contract: regenerating a stream requires replaying the same block sizes.
    """
    basis = (rng.random(count) >= cfg.pz_alice).astype(np.uint8)
    zbit = rng.integers(0, 2, count, dtype=np.uint8)
    if intensity_fixed is None:
        intensity = (rng.random(count) >= cfg.p_mu1).astype(np.uint8)
    else:
        intensity = np.full(count, int(intensity_fixed), dtype=np.uint8)
    return basis, intensity, zbit


def generate_symbols(cfg: ProtocolConfig, count: int, rng: np.random.Generator,
                     repeat_pattern: bool = False) -> list[StateSymbol]:
    """I.i.d. symbol stream; optionally one sequence_length pattern, tiled."""
    validate_config(cfg)
    if count < 0:
        raise LinkError(f"count must be >= 0, got {count}")
    draw = min(count, cfg.sequence_length) if repeat_pattern else count
    basis, intensity, zbit = symbol_arrays(cfg, draw, rng)
    if repeat_pattern and count > draw:
        reps = -(-count // draw)
        basis = np.tile(basis, reps)[:count]
        intensity = np.tile(intensity, reps)[:count]
        zbit = np.tile(zbit, reps)[:count]
    return [StateSymbol(Basis(b), Intensity(k), int(z) if b == 0 else None)
            for b, k, z in zip(basis, intensity, zbit)]


def _pulse_record(cfg: ProtocolConfig, index: int, mode: int,
                  b: int, k: int, z: int) -> PulseRecord:
    sym = StateSymbol(Basis(b), Intensity(k), int(z) if b == 0 else None)
    return PulseRecord(index=index, mode=mode, symbol=sym,
                       mean_photon_number=cfg.mu1 if k == 0 else cfg.mu2)


def simulate_pulse(pulse: PulseRecord, channel: ChannelState, receiver,
                   rng: np.random.Generator,
                   qubit_rate: float = 1.25e9) -> list[DetectionRecord]:
    """Photon-by-photon propagation of one pulse; no dead time applied.

    The readable reference for the per-slot physics: Poisson photon number,
    port routing from the coupling matrix, passive basis choice, detector
    efficiency, and outcome rules. Dead time and dark counts belong to
    detector_process and run_mc.
    """
    receivers = _receiver_pair(receiver)
    row = channel.coupling[pulse.mode]
    probs = np.array([row[0], row[1], row[2], max(1.0 - row.sum(), 0.0)])
    arrivals: dict[tuple[int, int], int] = {}
    n = rng.poisson(pulse.mean_photon_number)
    if n:
        for port in rng.choice(4, size=n, p=probs / probs.sum()):
            if port not in MODES:
                continue            # fundamental-mode port has no receiver
            rec = receivers[port - 1]
            basis = Basis.Z if rng.random() < rec.pz_bob else Basis.X
            if rng.random() < rec.detector(basis).efficiency:
                key = (int(port), int(basis))
                arrivals[key] = arrivals.get(key, 0) + 1
    records = []
    sym = pulse.symbol
    for (port, b) in sorted(arrivals):
        basis = Basis(b)
        rec = receivers[port - 1]
        if port == pulse.mode and sym.basis == basis:
            err = rng.random() < rec.error_prob(basis)
            outcome = (sym.z_value ^ err) if basis is Basis.Z else int(err)
        else:
            outcome = int(rng.integers(2))
        records.append(DetectionRecord(
            pulse_index=pulse.index, basis=basis, outcome=outcome,
            timestamp_ps=_event_timestamp_ps(pulse.index, basis, outcome,
                                             qubit_rate),
            receive_port=port, is_dark=False))
    return records


def detector_process(events: Sequence[DetectionRecord], spec: DetectorSpec,
                     duration: float, rng: np.random.Generator,
                     port: Optional[int] = None,
                     basis: Optional[Basis] = None) -> list[DetectionRecord]:
    """Dark counts, exact non-paralyzable dead time, timestamp quantization.

    events must be the time-sorted clicks of one physical detector. Darks
    are merged in as uniform arrivals flagged is_dark; port and basis tag
    them, defaulting to the first event's values.
    """
    if duration <= 0:
        raise LinkError(f"duration must be > 0, got {duration}")
    if events:
        port = events[0].receive_port if port is None else port
        basis = events[0].basis if basis is None else basis
    else:
        port = 0 if port is None else port
        basis = Basis.Z if basis is None else basis
    res_ps = max(int(round(spec.timestamp_resolution * 1e12)), 1)
    ts = np.array([e.timestamp_ps for e in events], dtype=np.int64)
    if ts.size and np.any(np.diff(ts) < 0):
        raise LinkError("events must be time-sorted")
    ts = (ts // res_ps) * res_ps
    n_dark = rng.poisson(spec.dark_rate * duration)
    dark_ts = np.sort((rng.random(n_dark) * duration * 1e12).astype(np.int64))
    dark_ts = (dark_ts // res_ps) * res_ps
    dark_outcomes = rng.integers(0, 2, n_dark)

    merged = np.concatenate([ts, dark_ts])
    order = np.argsort(merged, kind="stable")
    dead_ps = int(round(spec.dead_time * 1e12))
    accept, _ = dead_time_scan(merged[order], np.int64(max(dead_ps - 1, 0)),
                               _FAR_PAST)
    out: list[DetectionRecord] = []
    n_real = len(events)
    for pos, keep in zip(order, accept):
        if not keep:
            continue
        if pos < n_real:
            e = events[pos]
            out.append(DetectionRecord(
                pulse_index=e.pulse_index, basis=e.basis, outcome=e.outcome,
                timestamp_ps=int(ts[pos]), receive_port=e.receive_port,
                is_dark=e.is_dark))
        else:
            i = pos - n_real
            out.append(DetectionRecord(
                pulse_index=-1, basis=basis, outcome=int(dark_outcomes[i]),
                timestamp_ps=int(dark_ts[i]), receive_port=port, is_dark=True))
    return out


@dataclass(frozen=True, slots=True)
class ModeProbs:
    """Per-slot probabilities for one mode at a frozen channel state.

    Arrays index [basis, intensity] (or [basis]): click is the probability
    that the basis detector fires in a slot of that intensity (independent
    of the sender's basis); err_and_click is the joint probability of
    firing with a wrong outcome given the slot is sifted; load is the
    intensity-averaged click probability; u the dead-time acceptance
    factor 1 / (1 + blocked_slots * load), exact for the renewal process
    the slot engines implement.
    """

    click: np.ndarray           # (2, 2)
    err_and_click: np.ndarray   # (2, 2)
    load: np.ndarray            # (2,)
    u: np.ndarray               # (2,)


def _intensity_weights(cfg: ProtocolConfig,
                       intensity_fixed: Optional[Intensity]) -> np.ndarray:
    if intensity_fixed is None:
        return np.array([cfg.p_mu1, cfg.p_mu2])
    w = np.zeros(2)
    w[int(intensity_fixed)] = 1.0
    return w


def window_probabilities(cfg: ProtocolConfig, state: ChannelState, receiver,
                         intensity_fixed: Optional[Intensity] = None,
                         ) -> dict[int, ModeProbs]:
    """The shared per-slot probability model both engines are built on."""
    receivers = _receiver_pair(receiver)
    mus = np.array([cfg.mu1, cfg.mu2])
    weights = _intensity_weights(cfg, intensity_fixed)
    slot_dt = 1.0 / cfg.qubit_rate
    out: dict[int, ModeProbs] = {}
    for mode in MODES:
        other = MODES[0] + MODES[1] - mode
        rec = receivers[mode - 1]
        click = np.zeros((2, 2))
        errclick = np.zeros((2, 2))
        load = np.zeros(2)
        u = np.ones(2)
        for b in (0, 1):
            basis = Basis(b)
            det = rec.detector(basis)
            reach = rec.basis_prob(basis) * det.efficiency
            if reach == 0.0:
                # no light ever reaches this arm: the receiver has no
                # detector there, so it contributes no counts, not even dark
                continue
            c_own = -np.expm1(-mus * state.coupling[mode, mode] * reach)
            c_xt = 1.0 - float(np.dot(
                weights, np.exp(-mus * state.coupling[other, mode] * reach)))
            c_dark = -math.expm1(-det.dark_rate * slot_dt)
            click[b] = 1.0 - (1.0 - c_own) * (1.0 - c_xt) * (1.0 - c_dark)
            e_own = rec.error_prob(basis)
            errclick[b] = (e_own * c_own
                           + 0.5 * (1.0 - c_own) * c_xt
                           + 0.5 * (1.0 - c_own) * (1.0 - c_xt) * c_dark)
            load[b] = float(np.dot(weights, click[b]))
            u[b] = 1.0 / (1.0 + blocked_slots(det.dead_time, cfg.qubit_rate)
                          * load[b])
        out[mode] = ModeProbs(click=click, err_and_click=errclick,
                              load=load, u=u)
    return out


def _segment_plan(pulse_count: int, chunk_slots: int,
                  substep_slots: int) -> list[int]:
    """Deterministic segmentation shared by run_mc and stream regeneration."""
    plan = []
    start = 0
    while start < pulse_count:
        end = min(start + chunk_slots, pulse_count,
                  (start // substep_slots + 1) * substep_slots)
        plan.append(end - start)
        start = end
    return plan


_TRUTH_DTYPES = {"n_own": np.uint8, "cause": np.uint8, "coin": bool}
_EVENT_DTYPES = {"slot": np.int64, "basis": np.uint8,
                 "outcome": np.uint8, "is_dark": bool}


class McRun:
    """Results of one per-pulse run: tallies, ground truth, lazy streams."""

    def __init__(self, cfg: ProtocolConfig, pulse_count: int, root_seed: int,
                 intensity_fixed: Optional[Intensity],
                 segment_plan: list[int],
                 tallies: dict[int, TallyBlock],
                 truth: dict[int, dict[str, np.ndarray]],
                 events: Optional[dict[int, dict[str, np.ndarray]]],
                 final_state: ChannelState):
        self.cfg = cfg
        self.pulse_count = pulse_count
        self.duration = pulse_count / cfg.qubit_rate
        self.tallies = tallies
        self.final_state = final_state
        self._root_seed = root_seed
        self._intensity_fixed = intensity_fixed
        self._segment_plan = segment_plan
        self._truth = truth
        self._events = events

    def true_vacuum_count(self, mode: int) -> int:
        """Accepted sifted key-basis clicks whose own pulse was empty."""
        return int((self._truth[mode]["n_own"] == 0).sum())

    def true_single_count(self, mode: int) -> int:
        return int((self._truth[mode]["n_own"] == 1).sum())

    def true_phase_error(self, mode: int) -> float:
        """Hidden monitor-coin rate among single-photon key-basis clicks."""
        t = self._truth[mode]
        single = t["n_own"] == 1
        if not single.any():
            return float("nan")
        return float(t["coin"][single].mean())

    def cause_counts(self, mode: int) -> dict[str, int]:
        cause = self._truth[mode]["cause"]
        return {"own": int((cause == 0).sum()),
                "crosstalk": int((cause == 1).sum()),
                "dark": int((cause == 2).sum())}

    def detections(self, mode: int) -> Iterator[DetectionRecord]:
        if self._events is None:
            raise LinkError("run_mc was invoked without events=True")
        ev = self._events[mode]
        rate = self.cfg.qubit_rate
        for slot, b, outc, dark in zip(ev["slot"], ev["basis"],
                                       ev["outcome"], ev["is_dark"]):
            basis = Basis(int(b))
            yield DetectionRecord(
                pulse_index=int(slot), basis=basis, outcome=int(outc),
                timestamp_ps=_event_timestamp_ps(int(slot), basis,
                                                 int(outc), rate),
                receive_port=mode, is_dark=bool(dark))

    def pulses(self, mode: int) -> Iterator[PulseRecord]:
        """Regenerate the transmitted stream from its labelled substream."""
        gsym = rng_stream(self._root_seed, f"mc/symbols/{mode}")
        emitted = 0
        for seg in self._segment_plan:
            basis, intensity, zbit = symbol_arrays(self.cfg, seg, gsym,
                                                   self._intensity_fixed)
            for i in range(seg):
                yield _pulse_record(self.cfg, emitted + i, mode,
                                    int(basis[i]), int(intensity[i]),
                                    int(zbit[i]))
            emitted += seg


def _thin(rng: np.random.Generator, counts: np.ndarray, p: float) -> np.ndarray:
    if p <= 0.0:
        return np.zeros_like(counts)
    return rng.binomial(counts, min(p, 1.0))


def run_mc(cfg: ProtocolConfig, channel: ChannelState, receiver,
           pulse_count: int, rng: Union[int, np.random.Generator],
           drift_substep: float = 0.1, events: bool = False,
           chunk_slots: int = 1 << 22,
           intensity_fixed: Optional[Intensity] = None) -> McRun:
    """Per-pulse Monte Carlo of both modes over one shared channel.

    rng may be a seed or a Generator (a root seed is then drawn from it);
    every internal draw comes from a labelled substream of that root.
    """
    validate_config(cfg)
    receivers = _receiver_pair(receiver)
    if pulse_count > MAX_MC_PULSES:
        raise EngineCapacityError(
            f"pulse_count {pulse_count} exceeds engine maximum {MAX_MC_PULSES}")
    if pulse_count < 0:
        raise LinkError(f"pulse_count must be >= 0, got {pulse_count}")
    if drift_substep <= 0:
        raise LinkError(f"drift_substep must be > 0, got {drift_substep}")
    root_seed = int(rng) if isinstance(rng, (int, np.integer)) \
        else int(rng.integers(1 << 62))

    gsym = {m: rng_stream(root_seed, f"mc/symbols/{m}") for m in MODES}
    gphys = {m: rng_stream(root_seed, f"mc/physics/{m}") for m in MODES}
    det_keys = [(p, b) for p in MODES for b in (0, 1)]
    gdet = {key: rng_stream(root_seed, f"mc/detector/{key[0]}/{key[1]}")
            for key in det_keys}
    gdrift = rng_stream(root_seed, "mc/drift")

    mus = np.array([cfg.mu1, cfg.mu2])
    slot_dt = 1.0 / cfg.qubit_rate
    substep_slots = max(int(round(drift_substep * cfg.qubit_rate)), 1)
    plan = _segment_plan(pulse_count, chunk_slots, substep_slots)

    tallies = {m: np.zeros((2, 2, 2), dtype=np.int64) for m in MODES}
    truth = {m: {name: [] for name in _TRUTH_DTYPES} for m in MODES}
    ev_store = ({m: {name: [] for name in _EVENT_DTYPES} for m in MODES}
                if events else None)
    blocked_until = {key: _FAR_PAST for key in det_keys}
    blocked = {(p, b): np.int64(blocked_slots(
        receivers[p - 1].detector(Basis(b)).dead_time, cfg.qubit_rate))
        for (p, b) in det_keys}

    state = channel
    start = 0
    drift_steps = 0
    for n_slots in plan:
        per_mode = {}
        for m in MODES:
            basis, intensity, zbit = symbol_arrays(cfg, n_slots, gsym[m],
                                                   intensity_fixed)
            n_phot = gphys[m].poisson(mus[intensity])
            per_mode[m] = dict(basis=basis, intensity=intensity, zbit=zbit,
                               n_phot=n_phot)

        # photon arrivals per detector, split by originating transmitter
        arr_own = {key: np.zeros(n_slots, dtype=bool) for key in det_keys}
        arr_xt = {key: np.zeros(n_slots, dtype=bool) for key in det_keys}
        for m in MODES:
            g = gphys[m]
            n_phot = per_mode[m]["n_phot"]
            idx = np.flatnonzero(n_phot)
            if idx.size == 0:
                continue
            n = n_phot[idx]
            row = state.coupling[m]
            k1 = _thin(g, n, row[1])
            denom = 1.0 - row[1]
            k2 = _thin(g, n - k1, row[2] / denom if denom > 0 else 0.0)
            for port, kp in ((1, k1), (2, k2)):
                sub = kp > 0
                if not sub.any():
                    continue
                slots = idx[sub]
                kk = kp[sub]
                rec = receivers[port - 1]
                etz = rec.pz_bob * rec.detectors[0].efficiency
                dz = _thin(g, kk, etz)
                denz = 1.0 - etz
                etx = (1.0 - rec.pz_bob) * rec.detectors[1].efficiency
                dx = _thin(g, kk - dz, etx / denz if denz > 0 else 0.0)
                tgt = arr_own if port == m else arr_xt
                tgt[(port, 0)][slots[dz > 0]] = True
                tgt[(port, 1)][slots[dx > 0]] = True

        for key in det_keys:
            p, b = key
            g = gdet[key]
            rec = receivers[p - 1]
            det = rec.detector(Basis(b))
            if rec.basis_prob(Basis(b)) * det.efficiency == 0.0:
                continue    # arm without a detector: no counts, no darks
            p_dark = -math.expm1(-det.dark_rate * slot_dt)
            dark_mask = np.zeros(n_slots, dtype=bool)
            if p_dark > 0:
                n_dark = g.binomial(n_slots, p_dark)
                if n_dark:
                    dark_mask[np.unique(g.integers(0, n_slots, n_dark))] = True

            own = arr_own[key]
            xt = arr_xt[key]
            cand = np.flatnonzero(own | xt | dark_mask)
            if cand.size == 0:
                continue
            accept, blocked_until[key] = dead_time_scan(
                cand.astype(np.int64) + np.int64(start), blocked[key],
                blocked_until[key])
            acc = cand[accept]
            if acc.size == 0:
                continue
            cause = np.where(own[acc], 0,
                             np.where(xt[acc], 1, 2)).astype(np.uint8)

            pm = per_mode[p]
            a = pm["basis"][acc]
            k = pm["intensity"][acc]
            sifted = a == b
            e = np.where((cause == 0) & sifted, rec.error_prob(Basis(b)), 0.5)
            err = g.random(acc.size) < e
            if b == 0:
                outcome = (pm["zbit"][acc] ^ err).astype(np.uint8)
            else:
                outcome = err.astype(np.uint8)

            if sifted.any():
                cells = k[sifted].astype(np.int64) * 2 + err[sifted]
                counts = np.bincount(cells, minlength=4)
                tallies[p][b, 0, 0] += counts[0]    # signal, correct
                tallies[p][b, 0, 1] += counts[1]    # signal, error
                tallies[p][b, 1, 0] += counts[2]
                tallies[p][b, 1, 1] += counts[3]
                if b == 0:
                    t = truth[p]
                    t["n_own"].append(np.minimum(pm["n_phot"][acc][sifted],
                                                 255).astype(np.uint8))
                    t["cause"].append(cause[sifted])
                    coin_p = np.where(
                        cause[sifted] == 0,
                        0.5 * (1.0 - rec.interferometer_visibility), 0.5)
                    t["coin"].append(g.random(int(sifted.sum())) < coin_p)
            if ev_store is not None:
                st = ev_store[p]
                st["slot"].append(acc.astype(np.int64) + np.int64(start))
                st["basis"].append(np.full(acc.size, b, dtype=np.uint8))
                st["outcome"].append(outcome)
                st["is_dark"].append(cause == 2)

        start += n_slots
        if start < pulse_count and start % substep_slots == 0:
            state = step_drift(state, drift_substep, gdrift)
            drift_steps += 1

    # close out the trajectory so final_state sits at the run's end time
    leftover = (pulse_count - drift_steps * substep_slots) * slot_dt
    if leftover > 0:
        state = step_drift(state, leftover, gdrift)

    duration = pulse_count / cfg.qubit_rate if pulse_count else slot_dt
    blocks = {}
    for m in MODES:
        t = tallies[m]
        blocks[m] = TallyBlock(
            n_z_mu1=float(t[0, 0, 0] + t[0, 0, 1]), m_z_mu1=float(t[0, 0, 1]),
            n_z_mu2=float(t[0, 1, 0] + t[0, 1, 1]), m_z_mu2=float(t[0, 1, 1]),
            n_x_mu1=float(t[1, 0, 0] + t[1, 0, 1]), m_x_mu1=float(t[1, 0, 1]),
            n_x_mu2=float(t[1, 1, 0] + t[1, 1, 1]), m_x_mu2=float(t[1, 1, 1]),
            duration=duration, mode=m, cfg=cfg)
    truth_arrays = {
        m: {name: (np.concatenate(parts) if parts
                   else np.empty(0, dtype=_TRUTH_DTYPES[name]))
            for name, parts in truth[m].items()}
        for m in MODES}
    events_arrays = None
    if ev_store is not None:
        events_arrays = {}
        for m in MODES:
            merged = {name: (np.concatenate(parts) if parts
                             else np.empty(0, dtype=_EVENT_DTYPES[name]))
                      for name, parts in ev_store[m].items()}
            order = np.argsort(merged["slot"], kind="stable")
            events_arrays[m] = {name: arr[order]
                                for name, arr in merged.items()}
    return McRun(cfg=cfg, pulse_count=pulse_count, root_seed=root_seed,
                 intensity_fixed=intensity_fixed, segment_plan=plan,
                 tallies=blocks, truth=truth_arrays, events=events_arrays,
                 final_state=state)


@dataclass(frozen=True, slots=True)
class TallyRun:
    """Windowed tally-engine output plus the drift states that produced it."""

    blocks: dict[int, list[TallyBlock]]
    states: list[ChannelState]
    final_state: ChannelState


def run_tally(cfg: ProtocolConfig, channel: ChannelState, receiver,
              duration: float, window: float,
              rng: Union[int, np.random.Generator],
              intensity_fixed: Optional[Intensity] = None,
              window_states: Optional[Sequence[ChannelState]] = None,
              ) -> TallyRun:
    """Window-level engine: analytic per-slot probabilities, drawn counts.

    The channel is frozen at each window midpoint along one continuous
    drift trajectory; per-category counts then follow the binomial laws
    implied by window_probabilities, with the dead-time acceptance factor
    folded into the click probability.

    When window_states is given (one frozen channel per window, in order)
    the engine uses those instead of stepping the drift itself, so two
    runs that differ only in how slots are scheduled can sample exactly
    the same channel trajectory.  The count draws still come from rng.
    """
    validate_config(cfg)
    receivers = _receiver_pair(receiver)
    if duration <= 0 or window <= 0:
        raise LinkError("duration and window must be > 0")
    n_windows = duration / window
    if abs(n_windows - round(n_windows)) > 1e-9:
        raise LinkError(f"window {window} must divide duration {duration}")
    n_windows = int(round(n_windows))
    if window_states is not None and len(window_states) != n_windows:
        raise LinkError(
            f"window_states has {len(window_states)} entries, "
            f"need one per window ({n_windows})")
    slots_per_window = int(round(window * cfg.qubit_rate))
    g = rng if isinstance(rng, np.random.Generator) \
        else rng_stream(int(rng), "tally")

    weights = _intensity_weights(cfg, intensity_fixed)
    cat_p = np.outer([cfg.pz_alice, cfg.px_alice], weights).ravel()
    cat_p = cat_p / cat_p.sum()
    blocks: dict[int, list[TallyBlock]] = {m: [] for m in MODES}
    states: list[ChannelState] = []
    state = channel
    t_prev = 0.0
    for w in range(n_windows):
        if window_states is not None:
            state = window_states[w]
        else:
            t_mid = (w + 0.5) * window
            state = step_drift(state, t_mid - t_prev, g)
            t_prev = t_mid
        states.append(state)
        probs = window_probabilities(cfg, state, receivers, intensity_fixed)
        for m in MODES:
            # each transmitter draws its own symbol stream
            n_cat = g.multinomial(slots_per_window, cat_p).reshape(2, 2)
            mp = probs[m]
            cells = {}
            for b in (0, 1):
                for k in (0, 1):
                    n_bk = int(g.binomial(n_cat[b, k],
                                          mp.click[b, k] * mp.u[b]))
                    errfrac = (mp.err_and_click[b, k] / mp.click[b, k]
                               if mp.click[b, k] > 0 else 0.0)
                    cells[(b, k)] = (n_bk, int(g.binomial(n_bk, errfrac)))
            blocks[m].append(TallyBlock(
                n_z_mu1=cells[(0, 0)][0], m_z_mu1=cells[(0, 0)][1],
                n_z_mu2=cells[(0, 1)][0], m_z_mu2=cells[(0, 1)][1],
                n_x_mu1=cells[(1, 0)][0], m_x_mu1=cells[(1, 0)][1],
                n_x_mu2=cells[(1, 1)][0], m_x_mu2=cells[(1, 1)][1],
                duration=window, mode=m, cfg=cfg))
    if window_states is None:
        state = step_drift(state, 0.5 * window, g)
    return TallyRun(blocks=blocks, states=states, final_state=state)
