"""
Decoy-state finite-key secure key rate.

Three-intensity (signal, decoy, weak vacuum) closed-form bounds on the
vacuum and single-photon events of the majority basis, a phase-error bound
from the minority basis, and the usual privacy-amplification accounting.
Concentration corrections come from Hoeffding's inequality in its
relative-entropy form over the basis block (the default) or from per-count
multiplicative Chernoff bounds, selected by FiniteKeyConfig.bound. The
bound functions sit behind `decoy_bounds`, so an alternative analysis only
has to replace that one function.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

from scipy.optimize import brentq
from scipy.special import rel_entr

from .config import FiniteKeyConfig, ProtocolConfig
from .exceptions import DomainError
from .units import binary_entropy

CLASS_NAMES = ("signal", "decoy", "vacuum")
COUNT_TOLERANCE = 1e-9
ROOT_RTOL = 1e-12
# open ends of the (0, 1) search interval for the relative-entropy roots
Q_FLOOR = 1e-300
Q_CEILING = 1.0 - 1e-15


@dataclass(frozen=True)
class BlockCounts:
    """
    Sifted and error counts per intensity class (signal, decoy, vacuum).

    `z` is the majority basis (key), `x` the minority basis (phase-error
    estimation). Monte Carlo counts are integral; expected counts are real.
    """

    n_z: Tuple[float, float, float]
    m_z: Tuple[float, float, float]
    n_x: Tuple[float, float, float]
    m_x: Tuple[float, float, float]
    duration_s: float = 0.0
    pulses: float = 0.0

    def __post_init__(self):
        for name in ("n_z", "m_z", "n_x", "m_x"):
            values = getattr(self, name)
            if len(values) != 3:
                raise DomainError(f"{name} needs one entry per intensity class")
            if any(v < 0 or not math.isfinite(v) for v in values):
                raise DomainError(f"{name} counts must be finite and >= 0")
        for n, m, basis in ((self.n_z, self.m_z, "z"), (self.n_x, self.m_x, "x")):
            if any(e > c * (1 + COUNT_TOLERANCE) + COUNT_TOLERANCE for c, e in zip(n, m)):
                raise DomainError(f"Error counts exceed sifted counts in basis {basis}")
        if self.duration_s < 0:
            raise DomainError("Block duration must be >= 0")

    @classmethod
    def zeros(cls) -> "BlockCounts":
        zero = (0.0, 0.0, 0.0)
        return cls(zero, zero, zero, zero)

    def __add__(self, other: "BlockCounts") -> "BlockCounts":
        def add(a, b):
            return tuple(x + y for x, y in zip(a, b))

        return BlockCounts(
            add(self.n_z, other.n_z),
            add(self.m_z, other.m_z),
            add(self.n_x, other.n_x),
            add(self.m_x, other.m_x),
            self.duration_s + other.duration_s,
            self.pulses + other.pulses,
        )

    @property
    def sifted_z(self) -> float:
        return float(sum(self.n_z))

    @property
    def sifted_x(self) -> float:
        return float(sum(self.n_x))

    @property
    def qber_z(self) -> float:
        total = self.sifted_z
        return float(sum(self.m_z)) / total if total > 0 else 0.0

    @property
    def qber_x(self) -> float:
        total = self.sifted_x
        return float(sum(self.m_x)) / total if total > 0 else 0.0

    def to_dict(self) -> Dict:
        return {
            "n_z": dict(zip(CLASS_NAMES, self.n_z)),
            "m_z": dict(zip(CLASS_NAMES, self.m_z)),
            "n_x": dict(zip(CLASS_NAMES, self.n_x)),
            "m_x": dict(zip(CLASS_NAMES, self.m_x)),
            "duration_s": self.duration_s,
            "pulses": self.pulses,
        }


@dataclass(frozen=True)
class DecoyBounds:
    s0: float
    s1: float
    phi1: float
    s0_z: float
    s1_z: float
    s1_x: float
    v1_x: float
    gamma: float
    diagnostics: Tuple[str, ...] = ()


@dataclass(frozen=True)
class KeyRateReport:
    """Secure key of one block with every intermediate of the calculation."""

    secure_bits: float
    secure_rate_hz: float
    qber_majority: float
    s0: float
    s1: float
    phi1: float
    lambda_ec: float
    penalty_bits: float
    n_signal: float
    e_signal: float
    s0_z: float
    s1_z: float
    s1_x: float
    v1_x: float
    gamma: float
    block_bits: float
    duration_s: float
    bound: str
    asymptotic: bool
    diagnostics: Tuple[str, ...] = ()

    def to_dict(self) -> Dict:
        return {
            "secure_bits": self.secure_bits,
            "secure_rate_hz": self.secure_rate_hz,
            "qber_majority": self.qber_majority,
            "s0": self.s0,
            "s1": self.s1,
            "phi1": self.phi1,
            "lambda_ec": self.lambda_ec,
            "penalty_bits": self.penalty_bits,
            "n_signal": self.n_signal,
            "e_signal": self.e_signal,
            "s0_z": self.s0_z,
            "s1_z": self.s1_z,
            "s1_x": self.s1_x,
            "v1_x": self.v1_x,
            "gamma": self.gamma,
            "block_bits": self.block_bits,
            "duration_s": self.duration_s,
            "bound": self.bound,
            "asymptotic": self.asymptotic,
            "diagnostics": list(self.diagnostics),
        }


# Concentration bounds


def confidence_exponent(eps_sec: float) -> float:
    """ln(19 / eps_sec): the per-bound failure exponent."""
    return math.log(19.0 / eps_sec)


def chernoff_interval(observed: float, beta: float) -> Tuple[float, float]:
    """Bounds on the expectation behind an observed count (multiplicative Chernoff)."""
    if beta <= 0:
        return observed, observed
    upper = observed + beta + math.sqrt(beta * beta + 2.0 * beta * observed)
    lower = observed - 0.5 * (math.sqrt(beta * beta + 8.0 * beta * observed) - beta)
    return max(0.0, lower), upper


def _block_divergence(x: float, q: float) -> float:
    """Bernoulli relative entropy D(x || q) in nats."""
    return float(rel_entr(x, q) + rel_entr(1.0 - x, 1.0 - q))


def hoeffding_interval(observed: float, beta: float, n_total: float) -> Tuple[float, float]:
    """
    Bounds on the expectation behind `observed` events out of a block of
    `n_total` (Hoeffding's inequality in relative-entropy form): every q with
    n_total * D(observed / n_total || q) <= beta.
    """
    if beta <= 0:
        return observed, observed
    if n_total <= 0:
        return 0.0, 0.0
    x = min(max(observed / n_total, 0.0), 1.0)

    def excess(q: float) -> float:
        return n_total * _block_divergence(x, q) - beta

    upper = 1.0
    if x < Q_CEILING and excess(Q_CEILING) > 0:
        upper = brentq(excess, x, Q_CEILING, xtol=Q_FLOOR, rtol=ROOT_RTOL)
    lower = 0.0
    if x > Q_FLOOR and excess(Q_FLOOR) > 0:
        lower = brentq(excess, Q_FLOOR, x, xtol=Q_FLOOR, rtol=ROOT_RTOL)
    return n_total * lower, n_total * upper


def _interval(observed: float, beta: float, method: str, n_total: float) -> Tuple[float, float]:
    if method == "hoeffding":
        return hoeffding_interval(observed, beta, n_total)
    if method == "chernoff":
        return chernoff_interval(observed, beta)
    raise DomainError(f"Unknown bound method {method!r}")


def _gamma(eps: float, phi: float, c: float, d: float) -> float:
    """Random-sampling correction between the two bases' single-photon error rates."""
    if c <= 0 or d <= 0:
        return 0.5
    b = min(max(phi, 1e-12), 0.5)
    spread = (c + d) * (1.0 - b) * b / (c * d * math.log(2.0))
    argument = (c + d) / (c * d * (1.0 - b) * b * eps * eps)
    if argument <= 1.0:
        return 0.0
    return math.sqrt(spread * math.log2(argument))


def _vacuum_and_single(
    lo: Sequence[float], hi: Sequence[float], mus: Sequence[float], tau0: float, tau1: float
) -> Tuple[float, float]:
    """Lower bounds on vacuum and single-photon events from scaled count bounds."""
    mu1, mu2, mu3 = mus
    s0 = max(0.0, tau0 * (mu2 * lo[2] - mu3 * hi[1]) / (mu2 - mu3))
    denominator = mu1 * (mu2 - mu3) - mu2**2 + mu3**2
    bracket = lo[1] - hi[2] - (mu2**2 - mu3**2) / mu1**2 * (hi[0] - s0 / tau0)
    s1 = tau1 * mu1 / denominator * bracket
    return s0, s1


def decoy_bounds(
    counts: BlockCounts,
    protocol: ProtocolConfig,
    fk: FiniteKeyConfig,
    asymptotic: bool = False,
) -> DecoyBounds:
    """
    Vacuum and single-photon lower bounds (majority basis, signal class)
    and the single-photon phase-error upper bound.

    A negative single-photon bound is clamped to zero and noted in the
    diagnostics; it never raises.
    """
    mus = protocol.intensities
    probs = protocol.probabilities
    if not mus[0] > mus[1] + mus[2] or not mus[1] > mus[2]:
        raise DomainError("Decoy bounds need mu_signal > mu_decoy + mu_vacuum > 2 mu_vacuum")
    if any(p <= 0 for p in probs):
        raise DomainError("Every intensity class needs a nonzero emission probability")
    diagnostics: List[str] = []
    beta = 0.0 if asymptotic else confidence_exponent(fk.eps_sec)
    method = fk.bound
    tau0 = sum(p * math.exp(-mu) for p, mu in zip(probs, mus))
    tau1 = sum(p * math.exp(-mu) * mu for p, mu in zip(probs, mus))
    weight = [math.exp(mu) / p for p, mu in zip(probs, mus)]

    n_z_total = counts.sifted_z
    z_lo, z_hi = [], []
    for k in range(3):
        lo, hi = _interval(counts.n_z[k], beta, method, n_z_total)
        z_lo.append(weight[k] * lo)
        z_hi.append(weight[k] * hi)
    s0_z, s1_z = _vacuum_and_single(z_lo, z_hi, mus, tau0, tau1)
    if s1_z <= 0:
        diagnostics.append("single-photon bound crossed zero")
        s1_z = 0.0

    # the single-photon yield is basis independent, so the minority basis
    # holds a known fraction of the majority-basis single-photon events
    basis_ratio = (1.0 - protocol.basis_bias) ** 2 / protocol.basis_bias**2
    expected_x1 = s1_z * basis_ratio
    if method == "hoeffding":
        s1_x = hoeffding_interval(expected_x1, beta, counts.sifted_x)[0]
    else:
        s1_x = chernoff_interval(expected_x1, beta)[0]
    s0_x = s0_z * basis_ratio

    n_x_total = counts.sifted_x
    m_x_total = float(sum(counts.m_x))
    m_lo, m_hi = [], []
    for k in range(3):
        lo, hi = _interval(counts.m_x[k], beta, method, n_x_total)
        m_lo.append(weight[k] * lo)
        m_hi.append(weight[k] * hi)
    v1_decoy = tau1 * (m_hi[1] - m_lo[2]) / (mus[1] - mus[2])
    v1_total = _interval(m_x_total, beta, method, n_x_total)[1] - 0.5 * s0_x
    v1_x = max(0.0, min(v1_decoy, v1_total))

    if s1_x > 0:
        phi_x = min(0.5, v1_x / s1_x)
        gamma = 0.0 if asymptotic else _gamma(fk.eps_sec, phi_x, s1_z, s1_x)
        phi1 = min(0.5, phi_x + gamma)
    else:
        gamma = 0.0
        phi1 = 0.5
        if s1_z > 0:
            diagnostics.append("no minority-basis single-photon events; phase error set to 1/2")

    p_sig, mu_sig = probs[0], mus[0]
    s0 = s0_z * p_sig * math.exp(-mu_sig) / tau0
    s1 = s1_z * p_sig * math.exp(-mu_sig) * mu_sig / tau1
    n_sig = counts.n_z[0]
    if s0 + s1 > n_sig and n_sig > 0:
        diagnostics.append("vacuum plus single-photon bound exceeded signal counts; clamped")
        s1 = max(0.0, n_sig - s0)
        s0 = min(s0, n_sig)
    return DecoyBounds(s0, s1, phi1, s0_z, s1_z, s1_x, v1_x, gamma, tuple(diagnostics))


def finite_key_penalty(fk: FiniteKeyConfig) -> float:
    """Composable-security cost 6 log2(19/eps_sec) + log2(2/eps_cor)."""
    return 6.0 * math.log2(19.0 / fk.eps_sec) + math.log2(2.0 / fk.eps_correct)


def privacy_amplification_length(
    s0: float,
    s1: float,
    phi1: float,
    n_signal: float,
    e_signal: float,
    f_ec: float,
    penalty_bits: float,
) -> float:
    """l = s0 + s1 (1 - h(phi1)) - f n h(E) - penalty, clamped at 0."""
    length = (
        s0
        + s1 * (1.0 - binary_entropy(min(phi1, 0.5)))
        - f_ec * n_signal * binary_entropy(min(e_signal, 1.0))
        - penalty_bits
    )
    return max(0.0, length)


def secure_key_length(
    counts: BlockCounts,
    protocol: ProtocolConfig,
    fk: FiniteKeyConfig,
    asymptotic: bool = False,
) -> KeyRateReport:
    """Extractable secure bits of a block and the resulting rate."""
    bounds = decoy_bounds(counts, protocol, fk, asymptotic=asymptotic)
    n_sig = counts.n_z[0]
    e_sig = counts.m_z[0] / n_sig if n_sig > 0 else 0.0
    lambda_ec = fk.f_ec * n_sig * binary_entropy(min(e_sig, 1.0))
    penalty = 0.0 if asymptotic else finite_key_penalty(fk)
    secure = privacy_amplification_length(
        bounds.s0, bounds.s1, bounds.phi1, n_sig, e_sig, fk.f_ec, penalty
    )
    diagnostics = list(bounds.diagnostics)
    if secure == 0.0:
        diagnostics.append("zero key after privacy amplification")
        logging.debug(
            f"Zero key: s1={bounds.s1:.4g}, phi1={bounds.phi1:.4f}, E={e_sig:.4f}"
        )
    rate = secure / counts.duration_s if counts.duration_s > 0 else 0.0
    return KeyRateReport(
        secure_bits=secure,
        secure_rate_hz=rate,
        qber_majority=counts.qber_z,
        s0=bounds.s0,
        s1=bounds.s1,
        phi1=bounds.phi1,
        lambda_ec=lambda_ec,
        penalty_bits=penalty,
        n_signal=n_sig,
        e_signal=e_sig,
        s0_z=bounds.s0_z,
        s1_z=bounds.s1_z,
        s1_x=bounds.s1_x,
        v1_x=bounds.v1_x,
        gamma=bounds.gamma,
        block_bits=counts.sifted_z,
        duration_s=counts.duration_s,
        bound=fk.bound,
        asymptotic=asymptotic,
        diagnostics=tuple(diagnostics),
    )


def finite_key_report(op, fk: FiniteKeyConfig, asymptotic: bool = False) -> KeyRateReport:
    """Key of one block of `fk.block_bits` majority-basis bits from expected counts."""
    from .link_model import expected_block_counts, majority_sifted_rate, qber

    breakdown = qber(op)
    sifted_rate = majority_sifted_rate(op, breakdown)
    if sifted_rate <= 0:
        counts = BlockCounts.zeros()
        return secure_key_length(counts, op.protocol, fk, asymptotic=asymptotic)
    duration = fk.block_bits / sifted_rate
    counts = expected_block_counts(op, duration, breakdown)
    return secure_key_length(counts, op.protocol, fk, asymptotic=asymptotic)


def asymptotic_key_rate(op, fk: Optional[FiniteKeyConfig] = None) -> float:
    """Secure rate (Hz) with every finite-size penalty removed."""
    fk = fk or FiniteKeyConfig()
    return finite_key_report(op, fk, asymptotic=True).secure_rate_hz


def max_tolerable_attenuation(
    op,
    fk: Optional[FiniteKeyConfig] = None,
    asymptotic: bool = False,
    max_db: float = 60.0,
    step_db: float = 0.5,
    tol_db: float = 1e-3,
) -> float:
    """Channel attenuation (dB) where the secure rate reaches zero."""
    fk = fk or FiniteKeyConfig()

    def positive(db: float) -> bool:
        return finite_key_report(op.at_attenuation(db), fk, asymptotic).secure_bits > 0

    if not positive(0.0):
        return 0.0
    lo = 0.0
    hi = None
    db = step_db
    while db <= max_db:
        if not positive(db):
            hi = db
            break
        lo = db
        db += step_db
    if hi is None:
        return math.inf
    while hi - lo > tol_db:
        mid = 0.5 * (lo + hi)
        if positive(mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def qber_limit(op, fk: Optional[FiniteKeyConfig] = None, asymptotic: bool = False) -> float:
    """
    QBER at which the key vanishes when the interferometer visibility is
    degraded at this operating point.
    """
    from .link_model import qber

    fk = fk or FiniteKeyConfig()

    def at(visibility: float):
        point = replace(op, receiver=replace(op.receiver, visibility=visibility))
        return point, finite_key_report(point, fk, asymptotic).secure_bits > 0

    lo, hi = 0.5 + 1e-9, op.receiver.visibility
    if not at(hi)[1]:
        return qber(op).qber
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if at(mid)[1]:
            hi = mid
        else:
            lo = mid
    return qber(at(hi)[0]).qber
