"""Finite-key security analysis for the one-decoy protocol.

Turns sifted tallies into security quantities: pooled and per-intensity
QBERs, concentration-corrected vacuum and single-photon bounds, the phase
error extrapolated from the monitoring basis, error-correction leakage, and
the finite-key secret key length

    l = d0 + d1 * (1 - h(phi_z)) - lambda_ec
        - 6 * log2(eps_partitions / eps_sec) - 2 * log2(2 / eps_corr)

with eps_partitions = 21 by default, matching the number of concentration
inequalities composed by the bound set. All bounds are Hoeffding-type; the
epsilon budget is partitioned uniformly and exposed for sensitivity studies.

A single-photon bound that would be negative before clamping is the
photon-number-splitting signature of inconsistent per-intensity acquisition;
it is reported as a first-class flag, never hidden by the clamp.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from qkdsim.protocol import (
    Basis,
    ConfigError,
    Intensity,
    ProtocolConfig,
    StateSymbol,
    binary_entropy,
    tau_n,
    validate_config,
)

__all__ = [
    "TallyBlock",
    "DecoyBounds",
    "KeyRateResult",
    "ChannelSummary",
    "sift",
    "qber",
    "hoeffding_delta",
    "decoy_bounds",
    "ec_leakage",
    "secret_key_length",
    "assemble_key_length",
    "tallies_from_rates",
    "optimize_parameters",
]

_CELLS = ("n_z_mu1", "n_z_mu2", "m_z_mu1", "m_z_mu2",
          "n_x_mu1", "n_x_mu2", "m_x_mu1", "m_x_mu2")


@dataclass(frozen=True, slots=True)
class TallyBlock:
    """Sifted detections (n) and errors (m) per (basis, intensity) cell.

    Counts are reals: the per-pulse engine produces integers, while blocks
    synthesized from separately acquired intensity passes carry fractional
    reweighted counts.
    """

    n_z_mu1: float
    n_z_mu2: float
    m_z_mu1: float
    m_z_mu2: float
    n_x_mu1: float
    n_x_mu2: float
    m_x_mu1: float
    m_x_mu2: float
    duration: float
    mode: int
    cfg: ProtocolConfig

    def __post_init__(self):
        for b in ("z", "x"):
            for k in ("mu1", "mu2"):
                n = getattr(self, f"n_{b}_{k}")
                m = getattr(self, f"m_{b}_{k}")
                if not (0.0 <= m <= n):
                    raise ValueError(f"cell ({b},{k}) needs 0 <= m <= n, got m={m} n={n}")
        if not self.duration > 0:
            raise ValueError(f"duration must be > 0, got {self.duration}")

    @property
    def n_z(self) -> float:
        return self.n_z_mu1 + self.n_z_mu2

    @property
    def m_z(self) -> float:
        return self.m_z_mu1 + self.m_z_mu2

    @property
    def n_x(self) -> float:
        return self.n_x_mu1 + self.n_x_mu2

    @property
    def m_x(self) -> float:
        return self.m_x_mu1 + self.m_x_mu2

    def to_dict(self) -> dict:
        d = {name: getattr(self, name) for name in _CELLS}
        d["duration"] = self.duration
        d["mode"] = self.mode
        d["cfg"] = json.loads(self.cfg.to_json())
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TallyBlock":
        known = set(_CELLS) | {"duration", "mode", "cfg"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown field: {name}" for name in unknown])
        cfg = ProtocolConfig.from_dict(data.get("cfg", {}))
        args = {k: data[k] for k in _CELLS}
        return cls(**args, duration=data["duration"], mode=data.get("mode", 0), cfg=cfg)

    @classmethod
    def from_json(cls, text: str) -> "TallyBlock":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, slots=True)
class DecoyBounds:
    """Concentration-corrected bounds for one basis of one block."""

    s0_low: float
    s0_up: float
    s1_low: float
    s1_raw: float        # before clamping; negative flags infeasibility
    v1_up: float
    infeasible: bool


@dataclass(frozen=True, slots=True)
class KeyRateResult:
    d0: float
    d1: float
    phi_z: float
    lambda_ec: float
    secret_key_length_raw: float
    secret_key_length: float
    skr: float
    infeasible: bool = False
    short_block: bool = False

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def sift(symbols: Sequence[StateSymbol], detections, cfg: ProtocolConfig,
         duration: float, mode: int = 0) -> TallyBlock:
    """Basis-match sifting of a detection stream against the sent symbols.

    Keeps detections whose measurement basis equals the prepared basis,
    counts an error when outcomes disagree, and groups by intensity.
    Raises on a detection index outside the symbol stream.
    """
    cells = {name: 0.0 for name in _CELLS}
    n_symbols = len(symbols)
    for det in detections:
        idx = det.pulse_index
        if idx < 0 or idx >= n_symbols:
            raise IndexError(f"detection index {idx} outside symbol stream of {n_symbols}")
        sym = symbols[idx]
        if det.basis != sym.basis:
            continue
        k = "mu1" if sym.intensity is Intensity.SIGNAL else "mu2"
        b = "z" if sym.basis is Basis.Z else "x"
        cells[f"n_{b}_{k}"] += 1
        if sym.basis is Basis.Z:
            error = det.outcome != sym.z_value
        else:
            # the single monitoring state exits the correct interferometer
            # port when undisturbed; outcome 1 is the wrong port
            error = det.outcome == 1
        if error:
            cells[f"m_{b}_{k}"] += 1
    return TallyBlock(**cells, duration=duration, mode=mode, cfg=cfg)


def qber(block: TallyBlock, basis: Basis, intensity: Optional[Intensity] = None) -> float:
    """Observed error fraction, pooled over intensities unless one is given."""
    b = "z" if basis is Basis.Z else "x"
    if intensity is None:
        n = getattr(block, f"n_{b}")
        m = getattr(block, f"m_{b}")
    else:
        k = "mu1" if intensity is Intensity.SIGNAL else "mu2"
        n = getattr(block, f"n_{b}_{k}")
        m = getattr(block, f"m_{b}_{k}")
    if n <= 0:
        raise ValueError(f"no detections in basis {basis.name}")
    return m / n


def hoeffding_delta(n: float, eps: float) -> float:
    """Concentration deviation sqrt((n/2) ln(1/eps)) for a count of n."""
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0,1), got {eps}")
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    return math.sqrt(0.5 * n * math.log(1.0 / eps))


def _basis_bounds(n1: float, n2: float, m1: float, m2: float,
                  cfg: ProtocolConfig, eps1: float, finite_size: bool) -> DecoyBounds:
    """One-decoy vacuum/single-photon bounds from one basis's four cells."""
    n = n1 + n2
    m = m1 + m2
    t0 = tau_n(cfg, 0)
    t1 = tau_n(cfg, 1)
    mu1, mu2 = cfg.mu1, cfg.mu2
    if finite_size:
        dn = hoeffding_delta(n, eps1)
        dm = hoeffding_delta(m, eps1)
    else:
        dn = dm = 0.0
    up1 = math.exp(mu1) / cfg.p_mu1
    up2 = math.exp(mu2) / cfg.p_mu2
    n1_up = up1 * (n1 + dn)
    n2_low = up2 * max(n2 - dn, 0.0)
    m1_up = up1 * (m1 + dm)
    m2_up = up2 * (m2 + dm)
    m2_low = up2 * max(m2 - dm, 0.0)

    s0_low = t0 * (mu1 * n2_low - mu2 * n1_up) / (mu1 - mu2)
    s0_low = min(max(s0_low, 0.0), n)
    # vacuum upper bound: vacuum events err half the time, so errors cap the
    # vacuum population two ways (pooled, and decoy-rescaled)
    s0_up = min(2.0 * (m + dn), 2.0 * (t0 * m2_up + dn), n)

    r2 = (mu2 / mu1) ** 2
    s1_raw = t1 * mu1 / (mu2 * (mu1 - mu2)) * (
        n2_low - r2 * n1_up - (1.0 - r2) * s0_up / t0)
    s1_low = min(max(s1_raw, 0.0), n - s0_low)

    v1_up = t1 * (m1_up - m2_low) / (mu1 - mu2)
    v1_up = min(max(v1_up, 0.0), m)
    return DecoyBounds(s0_low=s0_low, s0_up=s0_up, s1_low=s1_low, s1_raw=s1_raw,
                       v1_up=v1_up, infeasible=s1_raw < 0.0)


def _gamma(a: float, b: float, c: float, d: float, npart: float) -> float:
    """Basis-extrapolation penalty on the single-photon phase error."""
    if c <= 0 or d <= 0:
        return 0.5
    if b <= 0.0:
        return 0.0
    b = min(b, 0.5)
    t1 = (c + d) * (1.0 - b) * b / (c * d * math.log(2.0))
    t2 = math.log2((c + d) / (c * d * (1.0 - b) * b) * (npart / a) ** 2)
    if t2 < 0:
        return 0.0
    return math.sqrt(t1 * t2)


def decoy_bounds(block: TallyBlock, x_donor: Optional[TallyBlock] = None,
                 eps_partitions: float = 21.0,
                 finite_size: bool = True) -> tuple[float, float, float, DecoyBounds]:
    """(d0_low, d1_low, phi_z_up) for one block, plus the Z-basis diagnostics.

    x_donor supplies monitoring-basis cells for a mode that was measured in
    Z only (shared phase error). With no X statistics at all the phase error
    falls back to the vacuous 0.5. finite_size=False drops every
    concentration term, the asymptotic limit used by analysis and tests.
    """
    cfg = validate_config(block.cfg)
    eps1 = cfg.eps_sec / eps_partitions
    bz = _basis_bounds(block.n_z_mu1, block.n_z_mu2, block.m_z_mu1, block.m_z_mu2,
                       cfg, eps1, finite_size)
    xb = x_donor if x_donor is not None else block
    bx = _basis_bounds(xb.n_x_mu1, xb.n_x_mu2, xb.m_x_mu1, xb.m_x_mu2,
                       cfg, eps1, finite_size)
    if bx.s1_low <= 0.0:
        phi = 0.5
    else:
        ratio = min(bx.v1_up / bx.s1_low, 0.5)
        if finite_size:
            phi = ratio + _gamma(cfg.eps_sec, ratio, bx.s1_low, bz.s1_low, eps_partitions)
        else:
            phi = ratio
        phi = min(max(phi, 0.0), 0.5)
    return bz.s0_low, bz.s1_low, phi, bz


def ec_leakage(n_z: float, q_z: float, f_ec: float) -> float:
    """Bits disclosed by error correction: f_ec * n_z * h(q_z)."""
    if n_z < 0:
        raise ValueError(f"n_z must be >= 0, got {n_z}")
    if not 0.0 <= q_z <= 1.0:
        raise ValueError(f"q_z must lie in [0, 1], got {q_z}")
    return f_ec * n_z * binary_entropy(q_z)


def assemble_key_length(d0: float, d1: float, phi_z: float, lambda_ec: float,
                        eps_sec: float, eps_corr: float,
                        eps_partitions: float = 21.0) -> float:
    """The finite-key length formula itself, with no clamping."""
    return (d0 + d1 * (1.0 - binary_entropy(phi_z)) - lambda_ec
            - 6.0 * math.log2(eps_partitions / eps_sec)
            - 2.0 * math.log2(2.0 / eps_corr))


def secret_key_length(block: TallyBlock, x_donor: Optional[TallyBlock] = None,
                      eps_partitions: float = 21.0) -> KeyRateResult:
    """Full evaluation of one block: bounds, leakage, key length, rate."""
    cfg = block.cfg
    d0, d1, phi, bz = decoy_bounds(block, x_donor=x_donor,
                                   eps_partitions=eps_partitions)
    q_z = block.m_z / block.n_z if block.n_z > 0 else 0.0
    lam = ec_leakage(block.n_z, q_z, cfg.f_ec)
    raw = assemble_key_length(d0, d1, phi, lam, cfg.eps_sec, cfg.eps_corr,
                              eps_partitions)
    clamped = max(raw, 0.0)
    return KeyRateResult(
        d0=d0, d1=d1, phi_z=phi, lambda_ec=lam,
        secret_key_length_raw=raw, secret_key_length=clamped,
        skr=clamped / block.duration,
        infeasible=bz.infeasible,
        short_block=block.n_z < cfg.block_size,
    )


def tallies_from_rates(cfg: ProtocolConfig, mode: int, *,
                       rate_z_mu1_hz: float, rate_z_mu2_hz: float,
                       qber_z_mu1: float, qber_z_mu2: float,
                       qber_x_mu1: float, qber_x_mu2: float,
                       total_z: Optional[float] = None,
                       duration: Optional[float] = None) -> TallyBlock:
    """Rebuild a TallyBlock from per-intensity sifted-Z rates and QBERs.

    Either total_z (detections in the block) or duration fixes the scale.
    Monitoring-basis counts follow the basis-choice odds ratio
    (px_a*px_b)/(pz_a*pz_b), since both bases share the same channel.
    """
    if (total_z is None) == (duration is None):
        raise ValueError("give exactly one of total_z or duration")
    r1, r2 = rate_z_mu1_hz, rate_z_mu2_hz
    if duration is None:
        duration = total_z / (r1 + r2)
    n_z1, n_z2 = r1 * duration, r2 * duration
    xfrac = (cfg.px_alice * cfg.px_bob) / (cfg.pz_alice * cfg.pz_bob)
    n_x1, n_x2 = n_z1 * xfrac, n_z2 * xfrac
    return TallyBlock(
        n_z_mu1=n_z1, n_z_mu2=n_z2,
        m_z_mu1=qber_z_mu1 * n_z1, m_z_mu2=qber_z_mu2 * n_z2,
        n_x_mu1=n_x1, n_x_mu2=n_x2,
        m_x_mu1=qber_x_mu1 * n_x1, m_x_mu2=qber_x_mu2 * n_x2,
        duration=duration, mode=mode, cfg=cfg)


@dataclass(frozen=True, slots=True)
class ChannelSummary:
    """Reduced channel description for parameter optimization."""

    loss_db: float
    qber_z: float
    qber_x: float
    pz_bob: float = 0.75
    duration: float = 100.0
    dark_prob: float = 0.0

    @classmethod
    def from_dict(cls, data: dict) -> "ChannelSummary":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown field: {name}" for name in unknown])
        return cls(**data)


def _summary_block(cfg: ProtocolConfig, summary: ChannelSummary) -> TallyBlock:
    """Expected tallies for a flat channel at the summary's loss and QBERs."""
    eta = 10.0 ** (-summary.loss_db / 10.0)
    slots = summary.duration * cfg.qubit_rate
    cells = {}
    for b, pa, pb in (("z", cfg.pz_alice, summary.pz_bob),
                      ("x", cfg.px_alice, 1.0 - summary.pz_bob)):
        q = summary.qber_z if b == "z" else summary.qber_x
        for k, mu, pk in (("mu1", cfg.mu1, cfg.p_mu1), ("mu2", cfg.mu2, cfg.p_mu2)):
            click = 1.0 - math.exp(-mu * eta * pb) + summary.dark_prob
            n = slots * pa * pk * click
            cells[f"n_{b}_{k}"] = n
            cells[f"m_{b}_{k}"] = q * n
    return TallyBlock(**cells, duration=summary.duration, mode=0, cfg=cfg)


def _skr_objective(mu1: float, p_mu1: float, pz_alice: float,
                   base: ProtocolConfig, summary: ChannelSummary,
                   mu_ratio: Optional[float], mu2: Optional[float]) -> float:
    if mu_ratio is not None:
        mu2 = mu1 / mu_ratio
    cfg = base.with_(mu1=mu1, mu2=mu2, p_mu1=p_mu1, pz_alice=pz_alice)
    if _params_invalid(cfg):
        return float("-inf")
    block = _summary_block(cfg, summary)
    return secret_key_length(block).skr


def _params_invalid(cfg: ProtocolConfig) -> bool:
    return not (0.0 < cfg.mu2 < cfg.mu1 < 1.0
                and 0.0 < cfg.p_mu1 < 1.0
                and 0.0 < cfg.pz_alice < 1.0)


def optimize_parameters(summary: ChannelSummary,
                        search_space: Optional[dict] = None,
                        base: Optional[ProtocolConfig] = None,
                        mu_ratio: Optional[float] = 3.1,
                        grid: int = 14,
                        seed: int = 0) -> tuple[ProtocolConfig, dict]:
    """Maximize modeled SKR over (mu1, p_mu1, pz_alice), decoy ratio pinned.

    Coarse deterministic grid seeds a simplex refinement; returns the best
    config plus diagnostics. Non-convergence returns the best point found
    with converged=False rather than raising.
    """
    del seed  # deterministic either way; accepted for interface stability
    base = base or ProtocolConfig(pz_bob=summary.pz_bob)
    space = {
        "mu1": (0.05, 0.95),
        "p_mu1": (0.3, 0.98),
        "pz_alice": (0.3, 0.98),
    }
    if search_space:
        space.update(search_space)

    def clip(name, x):
        lo, hi = space[name]
        return min(max(x, lo), hi)

    def objective(v) -> float:
        return _skr_objective(clip("mu1", v[0]), clip("p_mu1", v[1]),
                              clip("pz_alice", v[2]), base, summary,
                              mu_ratio, base.mu2)

    axes = [np.linspace(lo, hi, grid) for lo, hi in
            (space["mu1"], space["p_mu1"], space["pz_alice"])]
    best_val = float("-inf")
    best = None
    for a in axes[0]:
        for b in axes[1]:
            for c in axes[2]:
                val = objective((a, b, c))
                if val > best_val:
                    best_val, best = val, (a, b, c)

    grid_val = best_val
    res = minimize(lambda v: -objective(v), np.array(best), method="Nelder-Mead",
                   options={"xatol": 1e-4, "fatol": 1e-3, "maxiter": 400})
    refined = -res.fun
    if refined >= best_val:
        best_val = refined
        best = tuple(res.x)
    mu1 = clip("mu1", best[0])
    mu2 = mu1 / mu_ratio if mu_ratio is not None else base.mu2
    cfg = base.with_(mu1=mu1, mu2=mu2, p_mu1=clip("p_mu1", best[1]),
                     pz_alice=clip("pz_alice", best[2]))
    diagnostics = {
        "objective_skr": best_val,
        "grid_skr": grid_val,
        "converged": bool(res.success),
        "iterations": int(res.nit),
        "grid_points": grid ** 3,
    }
    return validate_config(cfg), diagnostics
