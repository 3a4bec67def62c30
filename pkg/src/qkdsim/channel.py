"""Time-varying three-mode power-coupling channel.

Models mode multiplexer, few-mode fiber span, and mode demultiplexer as a
3x3 matrix of power-coupling fractions from launched mode to received port,
with fiber loss, per-port insertion loss, and polarization-dependent loss
folded in. Ports and modes are indexed 0 = fundamental, 1 and 2 = the
higher-order pair.

Model assumptions, stated once here:
  - crosstalk composes incoherently (power addition); coherent multipath
    interference is out of scope
  - leakage from a higher-order port splits leak_split : (1 - leak_split)
    between its sibling higher-order port and the fundamental; the
    fundamental row splits its leakage evenly
  - slow environmental drift is a discretized mean-reverting
    (Ornstein-Uhlenbeck) process on three mode-mixing angles plus one scalar
    polarization angle, all mean zero so the frozen-drift channel reproduces
    the configured crosstalk figures
  - rotation between modes is applied in power space as Givens-style blocks
    [[c^2, s^2], [s^2, c^2]], which keeps every matrix row-stochastic
  - PDL is a deterministic transmittance 10^(-depth * sin(psi)^2 / 10) of
    the polarization angle, depth taken at the midpoint of the measured
    per-port range; full Stokes-space polarimetry is needless complexity

ChannelState is an immutable value; stepping returns a new state, so
independent simulation runs may advance their own states concurrently.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

__all__ = [
    "ChannelError",
    "LanternSpec",
    "DriftProcess",
    "ChannelState",
    "ANGLE_SCALES",
    "pdl_factor",
    "channel_at",
    "init_channel",
    "step_drift",
    "transmission_probs",
    "crosstalk_readback_db",
]

# drift amplitude multipliers for (theta12, theta01, theta02, psi): mixing
# between the higher-order pair dominates and sets the error-rate spread,
# coupling to the fundamental is weaker, and the polarization angle wanders
# much more than the mixing angles: polarization is the fastest-moving
# environmental degree of freedom, and through the port PDL it modulates
# per-port transmission without touching the crosstalk ratio
ANGLE_SCALES = (1.0, 0.25, 0.25, 3.0)


class ChannelError(ValueError):
    """Raised for channel specs that violate their invariants."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def _triple(name: str, value) -> tuple[float, float, float]:
    t = tuple(float(v) for v in value)
    if len(t) != 3:
        raise ChannelError([f"{name} needs one entry per port, got {len(t)}"])
    return t


@dataclass(frozen=True, slots=True)
class LanternSpec:
    """Static description of one lantern: crosstalk, loss, PDL per port."""

    crosstalk_db: tuple[float, float, float]
    insertion_loss_db: tuple[float, float, float] = (0.0, 0.0, 0.0)
    pdl_db: tuple[tuple[float, float], ...] = ((0.0, 0.0),) * 3
    leak_split: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "crosstalk_db",
                           _triple("crosstalk_db", self.crosstalk_db))
        object.__setattr__(self, "insertion_loss_db",
                           _triple("insertion_loss_db", self.insertion_loss_db))
        pdl = tuple(tuple(float(v) for v in pair) for pair in self.pdl_db)
        object.__setattr__(self, "pdl_db", pdl)
        v = []
        for i, ct in enumerate(self.crosstalk_db):
            if not ct < 0.0:
                v.append(f"crosstalk_db[{i}] must be negative, got {ct}")
        for i, il in enumerate(self.insertion_loss_db):
            if il < 0.0:
                v.append(f"insertion_loss_db[{i}] must be >= 0, got {il}")
        if len(pdl) != 3:
            v.append(f"pdl_db needs one [min, max] pair per port, got {len(pdl)}")
        else:
            for i, (lo, hi) in enumerate(pdl):
                if lo < 0.0 or hi < lo:
                    v.append(f"pdl_db[{i}] needs 0 <= min <= max, got [{lo}, {hi}]")
        if not 0.0 <= self.leak_split <= 1.0:
            v.append(f"leak_split must lie in [0,1], got {self.leak_split}")
        if v:
            raise ChannelError(v)

    @property
    def pdl_depth_db(self) -> tuple[float, float, float]:
        """Scalar PDL depth per port: midpoint of the measured range."""
        return tuple(0.5 * (lo + hi) for lo, hi in self.pdl_db)

    def to_dict(self) -> dict:
        return {
            "crosstalk_db": list(self.crosstalk_db),
            "insertion_loss_db": list(self.insertion_loss_db),
            "pdl_db": [list(p) for p in self.pdl_db],
            "leak_split": self.leak_split,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LanternSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ChannelError([f"unknown field: {name}" for name in unknown])
        if "pdl_db" in data:
            data = dict(data)
            data["pdl_db"] = tuple(tuple(p) for p in data["pdl_db"])
        return cls(**data)

    @classmethod
    def default_mux(cls) -> "LanternSpec":
        return cls(crosstalk_db=(-14.7, -17.5, -18.0))

    @classmethod
    def default_demux(cls) -> "LanternSpec":
        return cls(crosstalk_db=(-11.3, -14.6, -14.6),
                   pdl_db=((2.1, 2.4), (4.3, 4.4), (5.5, 5.7)))


@dataclass(frozen=True, slots=True)
class DriftProcess:
    """Mean-reverting drift of the mixing and polarization angles.

    The default amplitude is a mild ambient level; experiment scenarios set
    their own, calibrated so error-rate excursions span the observed range.
    """

    correlation_time: float = 100.0
    amplitude: float = 0.05
    seed_stream: str = "drift"

    def __post_init__(self):
        v = []
        if not self.correlation_time > 0.0:
            v.append(f"correlation_time must be > 0, got {self.correlation_time}")
        if self.amplitude < 0.0:
            v.append(f"amplitude must be >= 0, got {self.amplitude}")
        if v:
            raise ChannelError(v)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "DriftProcess":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ChannelError([f"unknown field: {name}" for name in unknown])
        return cls(**data)


@dataclass(frozen=True, slots=True, eq=False)
class ChannelState:
    """Immutable snapshot: coupling matrix plus the drift coordinates."""

    coupling: np.ndarray            # (3, 3) launched mode -> received port
    per_mode_loss_db: np.ndarray    # (3,) total loss per launched mode
    angles: tuple[float, float, float, float]
    t: float
    mux: LanternSpec
    demux: LanternSpec
    fiber_loss_db: float
    drift: DriftProcess

    @property
    def polarization_angle(self) -> float:
        return self.angles[3]


def pdl_factor(polarization_angle: float, pdl_db: float) -> float:
    """Transmittance multiplier in [10^(-pdl_db/10), 1], smooth in angle."""
    if pdl_db < 0.0:
        raise ChannelError([f"pdl_db must be >= 0, got {pdl_db}"])
    s2 = math.sin(polarization_angle) ** 2
    return 10.0 ** (-pdl_db * s2 / 10.0)


def _lantern_matrix(spec: LanternSpec) -> np.ndarray:
    """Row-stochastic port routing of one lantern, before loss and PDL."""
    m = np.zeros((3, 3))
    for i, ct in enumerate(spec.crosstalk_db):
        x = 10.0 ** (ct / 10.0)
        m[i, i] = 1.0 - x
        if i == 0:
            m[0, 1] = m[0, 2] = x / 2.0
        else:
            m[i, 3 - i] = spec.leak_split * x
            m[i, 0] = (1.0 - spec.leak_split) * x
    return m


def _power_givens(theta: float, a: int, b: int) -> np.ndarray:
    g = np.eye(3)
    c2 = math.cos(theta) ** 2
    s2 = math.sin(theta) ** 2
    g[a, a] = g[b, b] = c2
    g[a, b] = g[b, a] = s2
    return g


def _build_coupling(mux: LanternSpec, demux: LanternSpec, fiber_loss_db: float,
                    angles: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """(coupling, per_mode_loss_db) at fixed drift angles.

    coupling = D_in @ (M_mux @ R @ M_demux) @ D_out * fiber, where R is the
    power-rotation G12(theta12) @ G01(theta01) @ G02(theta02) and the D are
    diagonal insertion-loss times PDL transmittances.
    """
    theta12, theta01, theta02, psi = angles
    r = _power_givens(theta12, 1, 2) @ _power_givens(theta01, 0, 1) \
        @ _power_givens(theta02, 0, 2)
    core = _lantern_matrix(mux) @ r @ _lantern_matrix(demux)
    fiber = 10.0 ** (-fiber_loss_db / 10.0)
    d_in = np.array([10.0 ** (-il / 10.0) * pdl_factor(psi, p)
                     for il, p in zip(mux.insertion_loss_db, mux.pdl_depth_db)])
    d_out = np.array([10.0 ** (-il / 10.0) * pdl_factor(psi, p)
                      for il, p in zip(demux.insertion_loss_db, demux.pdl_depth_db)])
    coupling = (d_in[:, None] * core * d_out[None, :]) * fiber
    with np.errstate(divide="ignore"):
        loss_db = -10.0 * np.log10(coupling.sum(axis=1))
    return coupling, loss_db


def channel_at(mux: LanternSpec, demux: LanternSpec, fiber_loss_db: float,
               drift: DriftProcess, angles: Sequence[float],
               t: float = 0.0) -> ChannelState:
    """Channel frozen at explicit drift angles, for averaging and diagnostics."""
    if fiber_loss_db < 0.0:
        raise ChannelError([f"fiber_loss_db must be >= 0, got {fiber_loss_db}"])
    if len(angles) != 4:
        raise ChannelError([f"angles must have length 4, got {len(angles)}"])
    coupling, loss_db = _build_coupling(mux, demux, fiber_loss_db, angles)
    return ChannelState(coupling=coupling, per_mode_loss_db=loss_db,
                        angles=tuple(float(a) for a in angles), t=t,
                        mux=mux, demux=demux, fiber_loss_db=fiber_loss_db,
                        drift=drift)


def init_channel(mux: LanternSpec, demux: LanternSpec, fiber_loss_db: float,
                 drift: DriftProcess, rng: np.random.Generator) -> ChannelState:
    """Channel at t = 0, drift angles drawn from their stationary law."""
    angles = tuple(drift.amplitude * s * z
                   for s, z in zip(ANGLE_SCALES, rng.standard_normal(4)))
    return channel_at(mux, demux, fiber_loss_db, drift, angles)


def step_drift(state: ChannelState, dt: float,
               rng: np.random.Generator) -> ChannelState:
    """Advance the drift by dt with the exact mean-reverting transition.

    theta' = theta * a + sigma * sqrt(1 - a^2) * N(0, 1), a = exp(-dt/tau),
    exact for any step size, so substep choice only affects how often the
    coupling is refreshed, never the stationary statistics.
    """
    if not dt > 0.0:
        raise ChannelError([f"dt must be > 0, got {dt}"])
    drift = state.drift
    a = math.exp(-dt / drift.correlation_time)
    spread = math.sqrt(-math.expm1(-2.0 * dt / drift.correlation_time))
    angles = tuple(th * a + drift.amplitude * s * spread * z
                   for th, s, z in zip(state.angles, ANGLE_SCALES,
                                       rng.standard_normal(4)))
    coupling, loss_db = _build_coupling(state.mux, state.demux,
                                        state.fiber_loss_db, angles)
    return ChannelState(coupling=coupling, per_mode_loss_db=loss_db,
                        angles=angles, t=state.t + dt, mux=state.mux,
                        demux=state.demux, fiber_loss_db=state.fiber_loss_db,
                        drift=drift)


def transmission_probs(state: ChannelState, launched_mode: int) -> np.ndarray:
    """Per-photon routing (p_port0, p_port1, p_port2, p_lost), summing to 1."""
    if launched_mode not in (0, 1, 2):
        raise ChannelError([f"launched_mode must be 0, 1, or 2, got {launched_mode}"])
    row = state.coupling[launched_mode]
    return np.array([row[0], row[1], row[2], max(1.0 - row.sum(), 0.0)])


def crosstalk_readback_db(coupling: np.ndarray) -> np.ndarray:
    """Off-diagonal power fraction per row, in dB, as a meter would report."""
    out = np.empty(3)
    for i in range(3):
        total = coupling[i].sum()
        off = total - coupling[i, i]
        out[i] = 10.0 * math.log10(off / total) if off > 0 else -math.inf
    return out
