"""
Closed-form model of the BB84 link: per-pulse detection probabilities,
dead-time saturation and QBER decomposition.

Each detector is a renewal process. After an avalanche it is dead for D
gates; from then on it fires with a background hazard (photons, dark
counts, crosstalk from the other detector) plus an afterpulse hazard
decaying from its own trap population. Solving the renewal cycle gives the
detector's avalanche rate, live fraction and mean afterpulse hazard, which
feed the per-class detection and error probabilities.

Only the central time bin of the interferometer output is gated, so the
photon flux reaching the detectors is the receiver transmittance scaled by
ReceiverConfig.central_bin_fraction; eta_system keeps the plain loss budget.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, Optional, Tuple

import numpy as np

from .characterize import crosstalk_window_fractions
from .config import (
    ArrayConfig,
    ChannelConfig,
    ProtocolConfig,
    ReceiverConfig,
    SystemConfig,
)
from .exceptions import ConfigValidationError, DomainError
from .keyrate import BlockCounts
from .units import db_to_transmittance

CLASS_NAMES = ("signal", "decoy", "vacuum")
CONTRIBUTIONS = ("optical", "dark", "afterpulse", "crosstalk")

FIXED_POINT_TOL = 1e-14
FIXED_POINT_ITER = 500
TAIL_EPS = 1e-18


@dataclass(frozen=True)
class OperatingPoint:
    """Channel, receiver, detector pair and protocol of one link setting."""

    channel: ChannelConfig
    receiver: ReceiverConfig
    detectors: ArrayConfig
    protocol: ProtocolConfig
    # measured crosstalk probabilities; None derives them from the array
    crosstalk_sync: Optional[float] = None
    crosstalk_async: Optional[float] = None

    def __post_init__(self):
        if self.detectors.n_pixels != 2:
            raise ConfigValidationError(
                [
                    (
                        "array.pixel_configs",
                        f"the link needs exactly two pixels, got {self.detectors.n_pixels}",
                    )
                ]
            )

    @classmethod
    def from_config(cls, cfg: SystemConfig) -> "OperatingPoint":
        return cls(cfg.channel, cfg.receiver, cfg.array, cfg.protocol)

    def at_attenuation(self, attenuation_db: float) -> "OperatingPoint":
        channel = ChannelConfig.at_attenuation(attenuation_db, self.channel.db_per_km)
        return replace(self, channel=channel)

    @property
    def pulse_rate_hz(self) -> float:
        return self.protocol.rep_rate_ghz * 1e9

    @property
    def transmittance(self) -> float:
        """Channel and receiver transmittance, detectors excluded."""
        return db_to_transmittance(self.channel.total_loss_db + self.receiver.insertion_loss_db)

    @property
    def gated_transmittance(self) -> float:
        """Transmittance into the gated, interfering time bin."""
        return self.transmittance * self.receiver.central_bin_fraction

    def crosstalk_matrices(self) -> Tuple[np.ndarray, np.ndarray]:
        """Synchronous and asynchronous crosstalk probabilities, aggressor -> victim."""
        intrinsic = np.asarray(self.detectors.crosstalk_intrinsic, dtype=float)
        if self.crosstalk_sync is not None or self.crosstalk_async is not None:
            off = 1.0 - np.eye(2)
            sync = off * (self.crosstalk_sync or 0.0)
            async_ = off * (self.crosstalk_async or 0.0)
            return sync, async_
        f_sync, f_async = crosstalk_window_fractions(
            self.detectors.gate_width_ns,
            self.detectors.gate_period_ns,
            self.detectors.formation_tau_ns,
        )
        return intrinsic * f_sync, intrinsic * f_async


@dataclass(frozen=True)
class DetectorLoad:
    """Steady-state renewal solution for one detector."""

    avalanche_per_gate: float
    live_fraction: float
    afterpulse_hazard: float
    background_hazard: float
    trap_carryover: float

    def to_dict(self) -> Dict[str, float]:
        return {
            "avalanche_per_gate": self.avalanche_per_gate,
            "live_fraction": self.live_fraction,
            "afterpulse_hazard": self.afterpulse_hazard,
            "background_hazard": self.background_hazard,
            "trap_carryover": self.trap_carryover,
        }


@dataclass(frozen=True)
class RateBreakdown:
    """Gains, error rates and QBER shares of one operating point."""

    gains: Tuple[float, float, float]
    errors: Tuple[float, float, float]
    qber: float
    contributions: Dict[str, float]
    raw_rate_hz: float
    sifted_rate_hz: float
    sifted_probability: Tuple[float, float, float]
    error_probability: Tuple[float, float, float]
    loads: Tuple[DetectorLoad, DetectorLoad]

    def to_dict(self) -> Dict:
        return {
            "gains": dict(zip(CLASS_NAMES, self.gains)),
            "errors": dict(zip(CLASS_NAMES, self.errors)),
            "qber": self.qber,
            "contributions": dict(self.contributions),
            "raw_rate_hz": self.raw_rate_hz,
            "sifted_rate_hz": self.sifted_rate_hz,
            "detectors": [load.to_dict() for load in self.loads],
        }


def eta_system(op: OperatingPoint) -> float:
    """Mean detector SPDE times channel and receiver transmittance."""
    spde = np.mean([det.spde for det in op.detectors.pixel_configs])
    return float(spde * op.transmittance)


def saturate(rate_in: float, deadtime_ns: float, n_detectors: int = 1) -> float:
    """Non-paralyzable dead-time throughput, input split evenly over detectors."""
    if rate_in < 0 or not math.isfinite(rate_in):
        raise DomainError(f"Input rate must be finite and >= 0, got {rate_in}")
    if n_detectors < 1:
        raise DomainError(f"n_detectors must be >= 1, got {n_detectors}")
    tau = deadtime_ns * 1e-9
    per_detector = rate_in / n_detectors
    return n_detectors * per_detector / (1.0 + per_detector * tau)


def _renewal(
    background: float, apr: float, decay: float, deadtime_gates: int, carryover: float
) -> Tuple[float, float, float, float]:
    """
    One renewal cycle: returns (avalanches per gate, live fraction, mean
    afterpulse hazard over live gates, updated trap carryover).
    """
    if background <= 0.0:
        return 0.0, 1.0, 0.0, 0.0
    amplitude = apr * (1.0 - decay) / (1.0 - carryover) if apr > 0 else 0.0
    if amplitude > 0.0 and decay > 0.0:
        horizon = int(math.ceil(math.log(TAIL_EPS) / math.log(decay))) + 1
    else:
        horizon = 1
    j = np.arange(horizon + 1, dtype=float)
    powers = decay**j if decay > 0.0 else (j == 0).astype(float)
    # S_j: no click in the first j live gates
    cumulative = amplitude * (1.0 - powers) / (1.0 - decay) if decay < 1.0 else amplitude * j
    survival = np.exp(-background * j - cumulative)
    tail = survival[-1] / math.expm1(background)
    expected_live = float(survival.sum() + tail)
    cycle = deadtime_gates + expected_live
    out = 1.0 / cycle
    live = expected_live / cycle
    afterpulse = float(np.sum(survival * amplitude * powers)) / expected_live
    # E[r^J], J = live gates before the click
    first_click = survival[:-1] - survival[1:]
    moment = float(np.sum(first_click * powers[:-1]))
    carry = decay ** (deadtime_gates + 1) * moment if decay > 0.0 else 0.0
    return out, live, afterpulse, carry


def detector_loads(op: OperatingPoint) -> Tuple[DetectorLoad, DetectorLoad]:
    """Self-consistent renewal solution for both detectors."""
    dets = op.detectors.pixel_configs
    photon = [
        0.5
        * sum(p * mu for p, mu in zip(op.protocol.probabilities, op.protocol.intensities))
        * op.gated_transmittance
        * det.spde
        for det in dets
    ]
    dark = [det.dark_per_gate for det in dets]
    sync, async_ = op.crosstalk_matrices()
    universal = op.detectors.universal_deadtime
    if universal:
        return _universal_loads(op, photon, dark, sync)

    out = [0.0, 0.0]
    carry = [0.0, 0.0]
    live = [1.0, 1.0]
    afterpulse = [0.0, 0.0]
    background = [0.0, 0.0]
    for _ in range(FIXED_POINT_ITER):
        previous = list(out) + list(carry)
        for d, det in enumerate(dets):
            o = 1 - d
            background[d] = photon[d] + dark[d] + (sync[o, d] + async_[o, d]) * out[o]
            out[d], live[d], afterpulse[d], carry[d] = _renewal(
                background[d],
                det.afterpulse_total,
                det.trap_decay_per_gate,
                det.deadtime_gates,
                carry[d],
            )
        if max(abs(a - b) for a, b in zip(previous, list(out) + list(carry))) < FIXED_POINT_TOL:
            break
    else:
        logging.warning("Detector load fixed point did not converge")
    return tuple(
        DetectorLoad(out[d], live[d], afterpulse[d], background[d], carry[d]) for d in range(2)
    )


def _universal_loads(op, photon, dark, sync):
    # both detectors share one blanking cycle; later-gate crosstalk is blanked
    dets = op.detectors.pixel_configs
    background = sum(photon) + sum(dark)
    apr = float(np.mean([det.afterpulse_total for det in dets]))
    decay = float(np.mean([det.trap_decay_per_gate for det in dets]))
    deadtime = max(det.deadtime_gates for det in dets)
    carry = 0.0
    for _ in range(FIXED_POINT_ITER):
        out, live, afterpulse, new_carry = _renewal(background, apr, decay, deadtime, carry)
        if abs(new_carry - carry) < FIXED_POINT_TOL:
            carry = new_carry
            break
        carry = new_carry
    loads = []
    for d in range(2):
        share = (photon[d] + dark[d]) / background if background > 0 else 0.5
        loads.append(
            DetectorLoad(out * share, live, afterpulse * share, photon[d] + dark[d], carry)
        )
    return tuple(loads)


def _click_terms(hazard: float, live: float) -> Tuple[float, float]:
    """(fires on its own, live but quiet) probabilities in one gate."""
    quiet = math.exp(-hazard)
    return live * (1.0 - quiet), live * quiet


def _class_probabilities(op: OperatingPoint, loads, mu: float):
    """
    Matched-basis detection/error probabilities of one intensity class,
    their split over error causes, and the mismatched-basis detection.
    """
    dets = op.detectors.pixel_configs
    visibility = op.receiver.visibility
    sync, async_ = op.crosstalk_matrices()
    universal = op.detectors.universal_deadtime
    carrier = mu * op.gated_transmittance

    noise = []
    for d in range(2):
        o = 1 - d
        crosstalk = 0.0 if universal else async_[o, d] * loads[o].avalanche_per_gate
        noise.append((dets[d].dark_per_gate, loads[d].afterpulse_hazard, crosstalk))

    detect = 0.0
    error = 0.0
    shares = dict.fromkeys(CONTRIBUTIONS, 0.0)
    for bit in (0, 1):
        c, w = bit, 1 - bit
        m_c = carrier * dets[c].spde * (1.0 + visibility) / 2.0
        m_w = carrier * dets[w].spde * (1.0 - visibility) / 2.0
        h_c = m_c + sum(noise[c])
        h_w = m_w + sum(noise[w])
        u_c, v_c = _click_terms(h_c, loads[c].live_fraction)
        u_w, v_w = _click_terms(h_w, loads[w].live_fraction)
        s_cw, s_wc = sync[c, w], sync[w, c]

        p_det = 1.0 - (1.0 - u_c) * (1.0 - u_w)
        base = u_w * (1.0 - u_c) + 0.5 * u_c * u_w
        induced = 0.5 * (u_c * v_w * s_cw - u_w * v_c * s_wc)
        detect += 0.5 * p_det
        error += 0.5 * (base + induced)

        if h_w > 0.0:
            dark_w, ap_w, xt_w = noise[w]
            shares["optical"] += 0.5 * base * m_w / h_w
            shares["dark"] += 0.5 * base * dark_w / h_w
            shares["afterpulse"] += 0.5 * base * ap_w / h_w
            shares["crosstalk"] += 0.5 * base * xt_w / h_w
        shares["crosstalk"] += 0.5 * induced

    mismatched = 1.0
    for d in range(2):
        hazard = carrier * dets[d].spde / 2.0 + sum(noise[d])
        u, _ = _click_terms(hazard, loads[d].live_fraction)
        mismatched *= 1.0 - u
    return detect, error, shares, 1.0 - mismatched


def qber(op: OperatingPoint) -> RateBreakdown:
    """Per-class gains and error rates with the QBER split by cause."""
    loads = detector_loads(op)
    protocol = op.protocol
    bias = protocol.basis_bias
    match = protocol.sifting_factor

    gains, errors, sifted_p, error_p = [], [], [], []
    total_detect = 0.0
    total_error = 0.0
    shares = dict.fromkeys(CONTRIBUTIONS, 0.0)
    for p_k, mu in zip(protocol.probabilities, protocol.intensities):
        detect, error, class_shares, mismatched = _class_probabilities(op, loads, mu)
        gains.append(match * detect + (1.0 - match) * mismatched)
        errors.append(error / detect if detect > 0 else 0.0)
        sifted_p.append(detect)
        error_p.append(error)
        total_detect += p_k * detect
        total_error += p_k * error
        for name in CONTRIBUTIONS:
            shares[name] += p_k * class_shares[name]

    total_qber = total_error / total_detect if total_detect > 0 else 0.0
    contributions = {
        name: (value / total_detect if total_detect > 0 else 0.0) for name, value in shares.items()
    }
    rate = op.pulse_rate_hz
    raw = rate * sum(p * g for p, g in zip(protocol.probabilities, gains))
    sifted = rate * match * total_detect
    logging.debug(
        f"Link at {op.channel.total_loss_db:.2f} dB: raw {raw:.4g} Hz, QBER {total_qber:.4%}"
    )
    return RateBreakdown(
        gains=tuple(gains),
        errors=tuple(errors),
        qber=total_qber,
        contributions=contributions,
        raw_rate_hz=raw,
        sifted_rate_hz=sifted,
        sifted_probability=tuple(sifted_p),
        error_probability=tuple(error_p),
        loads=loads,
    )


def gain(mu: float, op: OperatingPoint, p_noise: Optional[float] = None) -> float:
    """
    Q_mu = 1 - (1 - p_noise) exp(-mu eta_sys).

    p_noise defaults to the per-pulse dark plus afterpulse click probability
    of both detectors at this operating point.
    """
    if mu < 0 or not math.isfinite(mu):
        raise DomainError(f"Mean photon number must be finite and >= 0, got {mu}")
    if p_noise is None:
        loads = detector_loads(op)
        quiet = 1.0
        for det, load in zip(op.detectors.pixel_configs, loads):
            hazard = det.dark_per_gate + load.afterpulse_hazard
            quiet *= 1.0 - load.live_fraction * -math.expm1(-hazard)
        p_noise = 1.0 - quiet
    return 1.0 - (1.0 - p_noise) * math.exp(-mu * eta_system(op))


def expected_block_counts(
    op: OperatingPoint, duration_s: float, breakdown: Optional[RateBreakdown] = None
) -> BlockCounts:
    """Expected sifted and error counts per class and basis over `duration_s`."""
    if duration_s < 0 or not math.isfinite(duration_s):
        raise DomainError(f"Duration must be finite and >= 0, got {duration_s}")
    if breakdown is None:
        breakdown = qber(op)
    protocol = op.protocol
    pulses = op.pulse_rate_hz * duration_s
    q_z = protocol.basis_bias**2
    q_x = (1.0 - protocol.basis_bias) ** 2
    emitted = np.asarray(protocol.probabilities) * pulses
    detect = np.asarray(breakdown.sifted_probability)
    error = np.asarray(breakdown.error_probability)
    return BlockCounts(
        n_z=tuple(emitted * q_z * detect),
        m_z=tuple(emitted * q_z * error),
        n_x=tuple(emitted * q_x * detect),
        m_x=tuple(emitted * q_x * error),
        duration_s=float(duration_s),
        pulses=float(pulses),
    )


def majority_sifted_rate(op: OperatingPoint, breakdown: Optional[RateBreakdown] = None) -> float:
    """Majority-basis sifted bits per second."""
    if breakdown is None:
        breakdown = qber(op)
    protocol = op.protocol
    per_pulse = sum(p * d for p, d in zip(protocol.probabilities, breakdown.sifted_probability))
    return op.pulse_rate_hz * protocol.basis_bias**2 * per_pulse
