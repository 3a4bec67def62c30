"""Protocol configuration, photon-number statistics, and seeded randomness.

Models an efficient three-state time-bin BB84 transmitter with one decoy
intensity: two basis states carry key material, a single superposition state
monitors leakage, and every pulse is phase-randomized weak coherent light so
photon number is Poissonian. The one-decoy finite-key bounds downstream
require 0 < mu2 < mu1 < 1, which is enforced here rather than at the point
of use.

Randomness is a deterministic, labelled-substream PRNG. It stands in for the
hardware quantum random number generator of a real transmitter and is
explicitly non-cryptographic; the contract is bit-for-bit reproducibility of
a simulation given (seed, stream label).
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, fields, replace
from enum import IntEnum
from typing import Optional

import numpy as np

__all__ = [
    "Basis",
    "Intensity",
    "StateSymbol",
    "ProtocolConfig",
    "ConfigError",
    "binary_entropy",
    "poisson_pn",
    "tau_n",
    "config_violations",
    "validate_config",
    "rng_stream",
]


class Basis(IntEnum):
    Z = 0
    X = 1


class Intensity(IntEnum):
    SIGNAL = 0
    DECOY = 1


class ConfigError(ValueError):
    """Raised on invalid configuration; carries the complete violation list."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True, slots=True)
class StateSymbol:
    """One prepared symbol: basis, optional time-bin value, intensity choice.

    z_value is 0 for the early bin and 1 for the late bin; the X basis has a
    single superposition state, so z_value must be absent there.
    """

    basis: Basis
    intensity: Intensity
    z_value: Optional[int] = None

    def __post_init__(self):
        if (self.z_value is None) != (self.basis is Basis.X):
            raise ValueError("z_value must be present exactly when basis is Z")
        if self.z_value is not None and self.z_value not in (0, 1):
            raise ValueError("z_value must be 0 (early) or 1 (late)")


@dataclass(frozen=True, slots=True)
class ProtocolConfig:
    """All transmitter/receiver probabilities, intensities, and security knobs.

    block_size is the number of Z-basis detections per finite-key block; the
    windowed analysis flags blocks that fall short of it instead of padding.
    """

    mu1: float = 0.31
    mu2: float = 0.10
    p_mu1: float = 0.8
    pz_alice: float = 0.9
    pz_bob: float = 0.75
    qubit_rate: float = 1.25e9
    sequence_length: int = 5000
    eps_sec: float = 1e-9
    eps_corr: float = 1e-9
    f_ec: float = 1.16
    block_size: int = 100_000_000

    @property
    def p_mu2(self) -> float:
        return 1.0 - self.p_mu1

    @property
    def px_alice(self) -> float:
        return 1.0 - self.pz_alice

    @property
    def px_bob(self) -> float:
        return 1.0 - self.pz_bob

    def to_json(self) -> str:
        return json.dumps({f.name: getattr(self, f.name) for f in fields(self)},
                          sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ProtocolConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown field: {name}" for name in unknown])
        cfg = cls(**data)
        return validate_config(cfg)

    @classmethod
    def from_json(cls, text: str) -> "ProtocolConfig":
        return cls.from_dict(json.loads(text))

    def with_(self, **changes) -> "ProtocolConfig":
        return replace(self, **changes)


def config_violations(cfg: ProtocolConfig) -> list[str]:
    """Complete list of invariant violations; empty when the config is valid."""
    v: list[str] = []
    if not (0.0 < cfg.mu2):
        v.append("mu2 must be > 0")
    if not (cfg.mu2 < cfg.mu1):
        v.append("mu2 must be strictly less than mu1")
    if not (cfg.mu1 < 1.0):
        v.append("mu1 must be strictly less than 1")
    for name in ("p_mu1", "pz_alice", "pz_bob"):
        p = getattr(cfg, name)
        if not (0.0 < p < 1.0):
            v.append(f"{name} probability out of range (0,1): {p}")
    for name in ("eps_sec", "eps_corr"):
        e = getattr(cfg, name)
        if not (0.0 < e < 1.0):
            v.append(f"{name} must lie in (0,1): {e}")
    if cfg.f_ec < 1.0:
        v.append(f"f_ec must be >= 1: {cfg.f_ec}")
    if cfg.block_size < 1:
        v.append(f"block_size must be >= 1: {cfg.block_size}")
    if cfg.qubit_rate <= 0:
        v.append(f"qubit_rate must be > 0: {cfg.qubit_rate}")
    if cfg.sequence_length < 1:
        v.append(f"sequence_length must be >= 1: {cfg.sequence_length}")
    return v


def validate_config(cfg: ProtocolConfig) -> ProtocolConfig:
    """Return cfg unchanged if valid, else raise with every violation listed."""
    violations = config_violations(cfg)
    if violations:
        raise ConfigError(violations)
    return cfg


def binary_entropy(x: float) -> float:
    """Binary entropy in bits, with the 0*log2(0) = 0 convention."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"binary_entropy domain is [0,1], got {x}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def poisson_pn(mu: float, n: int) -> float:
    """Poisson photon-number mass e^-mu mu^n / n! for a phase-randomized pulse."""
    if mu < 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    if n < 0 or n != int(n):
        raise ValueError(f"n must be a non-negative integer, got {n}")
    if mu == 0.0:
        return 1.0 if n == 0 else 0.0
    # log-space evaluation stays finite for large n
    return math.exp(-mu + n * math.log(mu) - math.lgamma(n + 1))


def tau_n(cfg: ProtocolConfig, n: int) -> float:
    """Total n-photon emission probability of the two-intensity mixture."""
    return cfg.p_mu1 * poisson_pn(cfg.mu1, n) + cfg.p_mu2 * poisson_pn(cfg.mu2, n)


def _label_entropy(stream_id: str) -> int:
    # stable across processes and platforms, unlike hash()
    digest = hashlib.sha256(stream_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_stream(seed: int, stream_id: str) -> np.random.Generator:
    """Deterministic, independently-seeded substream for (seed, stream_id)."""
    return np.random.default_rng(np.random.SeedSequence((seed, _label_entropy(stream_id))))
