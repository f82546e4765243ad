"""
Blind estimators that turn gate event logs into detector figures.

None of the estimators look at cause tags: SPDE, dark count rate,
afterpulsing and crosstalk are recovered from click statistics alone, as a
lab would from a time tagger. Dead-time-blanked gates are excluded from
each pixel's denominators.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numba import njit
from scipy.optimize import brentq

from ..utils.helpers import parallel_map
from .config import ArrayConfig, DetectorConfig
from .exceptions import BiasTargetError, DomainError, ModelError
from .spad_mc import (
    GateEventLog,
    IlluminationSchedule,
    _illuminated_in,
    run_trials,
)
from .units import RngSpec

QUIET_GATES = 500
MIN_AGGRESSOR_COUNTS = 1000


@dataclass(frozen=True)
class Estimate:
    """Per-pixel (or per-pair) values with standard errors and warning flags."""

    value: np.ndarray
    stderr: np.ndarray
    flags: np.ndarray

    def to_dict(self) -> Dict[str, Any]:
        return {
            "value": self.value.tolist(),
            "stderr": self.stderr.tolist(),
            "flags": self.flags.tolist(),
        }


@dataclass(frozen=True)
class DarkCountEstimate:
    per_gate: np.ndarray
    hz: np.ndarray
    stderr_hz: np.ndarray
    quiet_gates: np.ndarray


@dataclass(frozen=True)
class CrosstalkMatrices:
    sync: np.ndarray
    sync_err: np.ndarray
    async_: np.ndarray
    async_err: np.ndarray
    low_confidence: np.ndarray
    aggressor_counts: np.ndarray

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sync": self.sync.tolist(),
            "sync_err": self.sync_err.tolist(),
            "async": self.async_.tolist(),
            "async_err": self.async_err.tolist(),
            "low_confidence": self.low_confidence.tolist(),
            "aggressor_counts": self.aggressor_counts.tolist(),
        }


@dataclass(frozen=True)
class SpecificityResult:
    rates_hz: np.ndarray
    rates_err_hz: np.ndarray

    @property
    def leakage(self) -> np.ndarray:
        """Off-diagonal / diagonal net count rate per illuminated row."""
        diag = np.diag(self.rates_hz)[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(diag > 0, np.clip(self.rates_hz, 0.0, None) / diag, np.nan)
        np.fill_diagonal(ratio, 1.0)
        return ratio

    @property
    def specificity(self) -> float:
        """
        Worst-case diagonal / off-diagonal ratio.

        inf when no leakage is seen; 0 when some illuminated pixel shows no
        net signal of its own, since its row cannot tell pixels apart.
        """
        if self.rates_hz.size and np.any(np.diag(self.rates_hz) <= 0):
            return 0.0
        leakage = self.leakage.copy()
        np.fill_diagonal(leakage, 0.0)
        worst = np.nanmax(leakage) if leakage.size else 0.0
        return math.inf if worst <= 0 else 1.0 / worst

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rates_hz": self.rates_hz.tolist(),
            "rates_err_hz": self.rates_err_hz.tolist(),
            "leakage": self.leakage.tolist(),
            "specificity": self.specificity,
        }


@dataclass(frozen=True)
class CharacterizationReport:
    """Blind estimates of every detector figure across the array."""

    spde: Estimate
    dcr_hz: Estimate
    apr: Estimate
    crosstalk: CrosstalkMatrices
    specificity: Optional[SpecificityResult]
    n_gates: int
    mean_photons: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_gates": self.n_gates,
            "mean_photons": self.mean_photons,
            "spde": self.spde.to_dict(),
            "dcr_hz": self.dcr_hz.to_dict(),
            "apr": self.apr.to_dict(),
            "crosstalk": self.crosstalk.to_dict(),
            "specificity": None if self.specificity is None else self.specificity.to_dict(),
        }


@dataclass(frozen=True)
class BiasCurve:
    """
    Tabulated SPDE against pixel bias, optionally with the dark count rate
    and afterpulse probability at each bias point.
    """

    bias_v: Tuple[float, ...]
    spde: Tuple[float, ...]
    dcr_hz: Optional[Tuple[float, ...]] = None
    apr: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        bias = np.asarray(self.bias_v, dtype=float)
        spde = np.asarray(self.spde, dtype=float)
        if bias.ndim != 1 or bias.shape != spde.shape or bias.size < 2:
            raise DomainError("Bias curve needs matching bias/SPDE tables of length >= 2")
        if np.any(np.diff(bias) <= 0):
            raise DomainError("Bias curve voltages must be strictly increasing")
        if np.any(np.diff(spde) < 0):
            raise DomainError("Bias curve SPDE must be monotone nondecreasing")
        if spde.min() < 0 or spde.max() > 1:
            raise DomainError("Bias curve SPDE must lie in [0, 1]")
        for name in ("dcr_hz", "apr"):
            table = getattr(self, name)
            if table is not None and len(table) != bias.size:
                raise DomainError(f"Bias curve {name} table must match the bias table")

    @property
    def spde_range(self) -> Tuple[float, float]:
        return float(self.spde[0]), float(self.spde[-1])

    def spde_at(self, bias: float) -> float:
        return float(np.interp(bias, self.bias_v, self.spde))

    def dcr_at(self, bias: float) -> Optional[float]:
        return None if self.dcr_hz is None else float(np.interp(bias, self.bias_v, self.dcr_hz))

    def apr_at(self, bias: float) -> Optional[float]:
        return None if self.apr is None else float(np.interp(bias, self.bias_v, self.apr))

    def bias_for(self, spde: float) -> float:
        """Bias at which the interpolated curve reaches `spde` (Brent root solve)."""
        lo, hi = self.bias_v[0], self.bias_v[-1]
        f_lo = self.spde_at(lo) - spde
        f_hi = self.spde_at(hi) - spde
        if f_lo == 0.0:
            return float(lo)
        if f_hi == 0.0:
            return float(hi)
        return float(brentq(lambda v: self.spde_at(v) - spde, lo, hi, xtol=1e-12))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BiasCurve":
        return cls(
            bias_v=tuple(float(v) for v in data["bias_v"]),
            spde=tuple(float(v) for v in data["spde"]),
            dcr_hz=None if data.get("dcr_hz") is None else tuple(data["dcr_hz"]),
            apr=None if data.get("apr") is None else tuple(data["apr"]),
        )


@dataclass(frozen=True)
class BalanceResult:
    biases: Tuple[float, ...]
    spad_spde: Tuple[float, ...]
    system_spde: Tuple[float, ...]
    mismatch: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "biases": list(self.biases),
            "spad_spde": list(self.spad_spde),
            "system_spde": list(self.system_spde),
            "mismatch": self.mismatch,
        }


# Kernels


@njit(cache=True)
def _quiet_gate_counts(gates, pixels, n_pixels, n_gates, quiet, period, phase):
    # non-illuminated gates more than `quiet` gates after the pixel's last avalanche
    quiet_gates = np.zeros(n_pixels, dtype=np.int64)
    quiet_clicks = np.zeros(n_pixels, dtype=np.int64)
    last = np.full(n_pixels, -1, dtype=np.int64)
    for i in range(gates.shape[0]):
        g = gates[i]
        p = pixels[i]
        lo = last[p] + quiet if last[p] >= 0 else -1
        if g > lo:
            quiet_gates[p] += (g - lo) - _illuminated_in(lo, g, period, phase)
            if (g - phase) % period != 0:
                quiet_clicks[p] += 1
        last[p] = g
    for p in range(n_pixels):
        lo = last[p] + quiet if last[p] >= 0 else -1
        hi = n_gates - 1
        if hi > lo:
            quiet_gates[p] += (hi - lo) - _illuminated_in(lo, hi, period, phase)
    return quiet_gates, quiet_clicks


@njit(cache=True)
def _window_gate_counts(gates, pixels, deadtimes, n_pixels, n_gates, period, phase):
    # gates in the trailing window (g, g + D] of every avalanche, by aggressor
    total = np.zeros(n_pixels, dtype=np.int64)
    illuminated = np.zeros(n_pixels, dtype=np.int64)
    for i in range(gates.shape[0]):
        g = gates[i]
        p = pixels[i]
        end = min(g + deadtimes[p], n_gates - 1)
        if end > g:
            total[p] += end - g
            illuminated[p] += _illuminated_in(g, end, period, phase)
    return total, illuminated


# Estimators


def _click_fractions(log: GateEventLog) -> Tuple[np.ndarray, np.ndarray]:
    if np.any(log.live_illuminated <= 0) or np.any(log.live_dark_gates <= 0):
        raise ModelError("Log needs live illuminated and non-illuminated gates on every pixel")
    p_ill = log.counts_illuminated / log.live_illuminated
    p_dark = log.counts_dark_gates / log.live_dark_gates
    return p_ill, p_dark


def estimate_spde(log: GateEventLog, schedule: IlluminationSchedule) -> Estimate:
    """
    Invert P_ill = 1 - (1 - P_dark) exp(-mu eta) per illuminated pixel.

    Non-illuminated pixels report NaN. P_ill <= P_dark (with clicks present)
    is non-physical: the pixel reports 0 and is flagged.
    """
    if not schedule.mean_photons > 0:
        raise DomainError("SPDE estimation needs an illuminated schedule (mean_photons > 0)")
    mu = schedule.mean_photons
    p_ill, p_dark = _click_fractions(log)
    n = log.n_pixels
    value = np.full(n, np.nan)
    stderr = np.full(n, np.nan)
    flags = np.zeros(n, dtype=bool)
    for p in range(n):
        if not schedule.illuminates(p):
            continue
        if p_ill[p] >= 1.0 or p_dark[p] >= 1.0:
            raise ModelError(f"Pixel {p} clicks in every gate; SPDE is not identifiable")
        nonphysical = p_ill[p] < p_dark[p] or (p_ill[p] == p_dark[p] and p_ill[p] > 0)
        if nonphysical:
            logging.warning(
                f"Pixel {p}: illuminated click fraction {p_ill[p]:.3g} does not exceed "
                f"dark fraction {p_dark[p]:.3g}; SPDE reported as 0"
            )
            value[p] = 0.0
            flags[p] = True
        else:
            value[p] = -(math.log1p(-p_ill[p]) - math.log1p(-p_dark[p])) / mu
        variance = p_ill[p] / ((1 - p_ill[p]) * log.live_illuminated[p]) + p_dark[p] / (
            (1 - p_dark[p]) * log.live_dark_gates[p]
        )
        stderr[p] = math.sqrt(variance) / mu
    return Estimate(value, stderr, flags)


def estimate_dcr(
    log: GateEventLog, schedule: IlluminationSchedule, quiet_gates: int = QUIET_GATES
) -> DarkCountEstimate:
    """
    Dark count rate from non-illuminated gates far enough after each
    avalanche that its afterpulse traps have emptied.
    """
    period_ns = log.gate_period_ns
    quiet, clicks = _quiet_gate_counts(
        log.event_gate,
        log.event_pixel,
        log.n_pixels,
        log.n_gates,
        int(quiet_gates),
        schedule.period_gates,
        schedule.phase_gate,
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        fraction = np.where(quiet > 0, clicks / np.maximum(quiet, 1), np.nan)
        per_gate = -np.log1p(-np.minimum(fraction, 1.0 - 1e-15))
        stderr_gate = np.where(quiet > 0, np.sqrt(clicks) / np.maximum(quiet, 1), np.nan)
    to_hz = 1e9 / period_ns
    if np.any(quiet == 0):
        logging.warning("No quiet gates on some pixels; their dark count rate is undefined")
    return DarkCountEstimate(per_gate, per_gate * to_hz, stderr_gate * to_hz, quiet)


def estimate_apr(
    log: GateEventLog,
    schedule: IlluminationSchedule,
    dark: Optional[DarkCountEstimate] = None,
    quiet_gates: int = QUIET_GATES,
) -> Estimate:
    """
    Afterpulse probability per avalanche.

    Clicks in live non-illuminated gates minus the dark expectation give the
    excess; it is scaled up to all live gates (afterpulses land on
    illuminated gates too) and divided by the pixel's avalanche count.
    Negative excess is reported as 0 and flagged.
    """
    if dark is None:
        dark = estimate_dcr(log, schedule, quiet_gates)
    n = log.n_pixels
    value = np.zeros(n)
    stderr = np.full(n, np.nan)
    flags = np.zeros(n, dtype=bool)
    for p in range(n):
        avalanches = int(log.counts_total[p])
        live_dark = int(log.live_dark_gates[p])
        if avalanches == 0 or live_dark == 0 or not np.isfinite(dark.per_gate[p]):
            flags[p] = True
            continue
        expected_dark = live_dark * -math.expm1(-dark.per_gate[p])
        scale = (live_dark + int(log.live_illuminated[p])) / live_dark
        excess = float(log.counts_dark_gates[p]) - expected_dark
        stderr[p] = math.sqrt(max(float(log.counts_dark_gates[p]), 1.0)) * scale / avalanches
        if excess < 0:
            logging.warning(
                f"Pixel {p}: negative afterpulse excess {excess:.1f}; APR reported as 0"
            )
            flags[p] = True
            continue
        value[p] = excess * scale / avalanches
    return Estimate(value, stderr, flags)


def measure_crosstalk(log: GateEventLog) -> CrosstalkMatrices:
    """
    Synchronous and asynchronous crosstalk per aggressor -> victim pair.

    sync = (same-gate coincidences - accidentals) / N_a, with accidentals
    from the victim's per-gate click probability in the aggressor's gate
    class (illuminated or not). async uses the gates 1..D after each
    aggressor avalanche. Negative values clamp to 0; fewer than 1000
    aggressor avalanches raise the low-confidence flag.
    """
    n = log.n_pixels
    schedule = log.schedule
    n_ill = log.n_illuminated_gates
    n_dark = log.n_dark_gates
    p_ill = log.counts_illuminated / max(n_ill, 1)
    p_dark = log.counts_dark_gates / max(n_dark, 1)

    window_total, window_ill = _window_gate_counts(
        log.event_gate,
        log.event_pixel,
        log.deadtime_gates,
        n,
        log.n_gates,
        schedule.period_gates,
        schedule.phase_gate,
    )

    sync = np.zeros((n, n))
    sync_err = np.zeros((n, n))
    async_ = np.zeros((n, n))
    async_err = np.zeros((n, n))
    low = np.zeros((n, n), dtype=bool)
    aggressors = log.counts_total.astype(np.int64)
    for a in range(n):
        n_a = int(aggressors[a])
        for v in range(n):
            if v == a:
                continue
            low[a, v] = n_a < MIN_AGGRESSOR_COUNTS
            if n_a == 0:
                continue
            accidental = log.counts_illuminated[a] * p_ill[v] + log.counts_dark_gates[a] * p_dark[v]
            c_same = float(log.coincidences[a, v])
            sync[a, v] = max(0.0, (c_same - accidental) / n_a)
            sync_err[a, v] = math.sqrt(c_same) / n_a

            window_dark = window_total[a] - window_ill[a]
            accidental_post = window_ill[a] * p_ill[v] + window_dark * p_dark[v]
            c_post = float(log.post_gate[a, v])
            async_[a, v] = max(0.0, (c_post - accidental_post) / n_a)
            async_err[a, v] = math.sqrt(c_post) / n_a
    if np.any(low & ~np.eye(n, dtype=bool)):
        logging.debug("Some crosstalk pairs have fewer than 1000 aggressor avalanches")
    return CrosstalkMatrices(sync, sync_err, async_, async_err, low, aggressors)


def crosstalk_window_fractions(
    gate_width_ns: float,
    gate_period_ns: float,
    formation_tau_ns: float,
    max_gates: Optional[int] = None,
) -> Tuple[float, float]:
    """
    Fractions of intrinsic crosstalk landing in the aggressor's gate
    (synchronous) and in later gate windows (asynchronous), for stimuli
    emitted mid-gate with an exponential formation delay.
    """
    if not 0 < gate_width_ns <= gate_period_ns:
        raise DomainError("Gate width must lie in (0, gate period]")
    if not formation_tau_ns > 0:
        raise DomainError("Formation time must be > 0")
    half = 0.5 * gate_width_ns / formation_tau_ns
    sync = -math.expm1(-half)
    step = math.exp(-gate_period_ns / formation_tau_ns)
    window = math.exp(half) - math.exp(-half)
    if max_gates is None:
        tail = step / (1.0 - step)
    else:
        tail = 0.0
        if max_gates > 0:
            tail = step * -math.expm1(max_gates * math.log(step)) / (1.0 - step)
    # the later-gate windows can cover at most what remains after the first gate
    return sync, min(window * tail, 1.0 - sync)


def _net_rate_job(array, schedule, n_gates, rng, n_trials):
    return run_trials(array, schedule, n_gates, rng, n_trials=n_trials, policy="per-pixel")


def specificity_matrix(
    array: ArrayConfig,
    schedule: IlluminationSchedule,
    n_gates: int,
    rng: RngSpec,
    n_trials: int = 1,
    logs: Optional[Sequence[GateEventLog]] = None,
    dark_log: Optional[GateEventLog] = None,
) -> SpecificityResult:
    """
    Dark-subtracted count rate on pixel j while only pixel i is illuminated.

    One run per illuminated pixel plus one dark run; substream i of `rng`
    drives run i and substream n drives the dark run.
    """
    n = array.n_pixels
    if logs is None or dark_log is None:
        schedules = [_targeted(schedule, i) for i in range(n)] + [_targeted(schedule, None).dark()]
        jobs = [
            (array, sched, n_gates, rng.substream(i), n_trials) for i, sched in enumerate(schedules)
        ]
        runs = parallel_map(_net_rate_job, jobs)
        logs, dark_log = runs[:n], runs[n]
    seconds = n_gates * array.gate_period_ns * 1e-9
    dark_seconds = dark_log.n_gates * array.gate_period_ns * 1e-9
    dark_rate = dark_log.counts_total / dark_seconds
    dark_var = dark_log.counts_total / dark_seconds**2
    rates = np.zeros((n, n))
    errors = np.zeros((n, n))
    for i, log in enumerate(logs):
        counts = log.counts_total.astype(float)
        rates[i] = counts / seconds - dark_rate
        errors[i] = np.sqrt(counts / seconds**2 + dark_var)
    return SpecificityResult(rates, errors)


def _targeted(schedule: IlluminationSchedule, pixel: Optional[int]) -> IlluminationSchedule:
    return replace(schedule, target_pixel=pixel)


def coupling_loss(system_spde: float, channel_loss_db: float, spad_spde: float) -> float:
    """
    Optical coupling loss (dB) between waveguide chip and SPAD:
    10 log10(spad / system) - channel loss.
    """
    if not 0 < system_spde <= 1 or not 0 < spad_spde <= 1:
        raise DomainError("SPDE values must lie in (0, 1]")
    if not math.isfinite(channel_loss_db):
        raise DomainError(f"Channel loss must be finite, got {channel_loss_db}")
    if system_spde > spad_spde:
        raise DomainError(
            f"System SPDE {system_spde} exceeds SPAD SPDE {spad_spde}; check the inputs"
        )
    loss = 10.0 * math.log10(spad_spde / system_spde) - channel_loss_db
    if loss < 0:
        logging.warning(
            f"Negative coupling loss {loss:.3f} dB: system SPDE exceeds what the channel "
            "loss allows"
        )
    return loss


def efficiency_mismatch(values: Sequence[float]) -> float:
    """(max - min) / mean; 0 for a single value."""
    values = np.asarray(values, dtype=float)
    mean = values.mean()
    if values.size < 2 or mean == 0:
        return 0.0
    return float((values.max() - values.min()) / mean)


def balance_biases(
    curves: Sequence[BiasCurve],
    channel_losses_db: Sequence[float],
    target_system_spde: float,
) -> BalanceResult:
    """
    Per-pixel bias giving a uniform system SPDE behind unequal channel losses.

    Pixel i needs SPAD SPDE target * 10^(loss_i / 10); its bias follows by
    root finding on its monotone curve.
    """
    if len(curves) != len(channel_losses_db):
        raise DomainError("One channel loss per bias curve is required")
    if not 0 < target_system_spde <= 1:
        raise DomainError(f"Target system SPDE must lie in (0, 1], got {target_system_spde}")
    biases, spad, system = [], [], []
    for pixel, (curve, loss_db) in enumerate(zip(curves, channel_losses_db)):
        transmittance = 10.0 ** (-loss_db / 10.0)
        needed = target_system_spde / transmittance
        lo, hi = curve.spde_range
        if needed < lo - 1e-12 or needed > hi + 1e-12:
            raise BiasTargetError(pixel, (lo, hi), needed)
        bias = curve.bias_for(min(max(needed, lo), hi))
        eta = curve.spde_at(bias)
        biases.append(bias)
        spad.append(eta)
        system.append(eta * transmittance)
    mismatch = efficiency_mismatch(system)
    logging.info(f"Balanced {len(curves)} pixel(s); system SPDE mismatch {mismatch:.2e}")
    return BalanceResult(tuple(biases), tuple(spad), tuple(system), mismatch)


def bias_sweep(
    curve: BiasCurve, detector: DetectorConfig, biases: Optional[Sequence[float]] = None
) -> List[Dict[str, float]]:
    """
    Detector figures as the array bias moves along a curve. DCR and APR come
    from the curve's tables when present, else the detector's values hold.
    """
    if biases is None:
        biases = curve.bias_v
    rows = []
    for bias in biases:
        spde = curve.spde_at(bias)
        dcr = curve.dcr_at(bias)
        apr = curve.apr_at(bias)
        det = replace(
            detector,
            spde=spde,
            dcr_hz=detector.dcr_hz if dcr is None else dcr,
            afterpulse_total=detector.afterpulse_total if apr is None else apr,
        )
        rows.append(
            {
                "bias_v": float(bias),
                "spde": det.spde,
                "dcr_hz": det.dcr_hz,
                "afterpulse_total": det.afterpulse_total,
            }
        )
    return rows


def characterize_array(
    array: ArrayConfig,
    schedule: IlluminationSchedule,
    n_gates: int,
    rng: RngSpec,
    n_trials: int = 1,
    quiet_gates: int = QUIET_GATES,
    with_specificity: bool = True,
    update_callback: Optional[Callable[[str], None]] = None,
) -> CharacterizationReport:
    """
    Full array characterization: one run with each pixel illuminated in turn
    and one dark run. Pixel i's SPDE, DCR, afterpulsing and crosstalk row
    come from the run that illuminates it.
    """
    n = array.n_pixels
    schedules = [_targeted(schedule, i) for i in range(n)] + [_targeted(schedule, None).dark()]
    if update_callback:
        update_callback(f"Characterizing {n} pixel(s) over {n_gates} gates per run")
    jobs = [
        (array, sched, n_gates, rng.substream(i), n_trials) for i, sched in enumerate(schedules)
    ]
    runs = parallel_map(_net_rate_job, jobs)
    logs, dark_log = runs[:n], runs[n]

    spde = Estimate(np.full(n, np.nan), np.full(n, np.nan), np.zeros(n, dtype=bool))
    dcr = Estimate(np.full(n, np.nan), np.full(n, np.nan), np.zeros(n, dtype=bool))
    apr = Estimate(np.zeros(n), np.full(n, np.nan), np.zeros(n, dtype=bool))
    sync = np.zeros((n, n))
    sync_err = np.zeros((n, n))
    async_ = np.zeros((n, n))
    async_err = np.zeros((n, n))
    low = np.zeros((n, n), dtype=bool)
    aggressors = np.zeros(n, dtype=np.int64)
    for i, log in enumerate(logs):
        sched = schedules[i]
        s = estimate_spde(log, sched)
        d = estimate_dcr(log, sched, quiet_gates)
        a = estimate_apr(log, sched, d, quiet_gates)
        x = measure_crosstalk(log)
        for est, src in ((spde, s), (apr, a)):
            est.value[i] = src.value[i]
            est.stderr[i] = src.stderr[i]
            est.flags[i] = src.flags[i]
        dcr.value[i] = d.hz[i]
        dcr.stderr[i] = d.stderr_hz[i]
        dcr.flags[i] = d.quiet_gates[i] == 0
        sync[i], sync_err[i] = x.sync[i], x.sync_err[i]
        async_[i], async_err[i] = x.async_[i], x.async_err[i]
        low[i] = x.low_confidence[i]
        aggressors[i] = x.aggressor_counts[i]

    specificity = None
    if with_specificity:
        specificity = specificity_matrix(
            array, schedule, n_gates, rng, logs=logs, dark_log=dark_log
        )
    for i in range(n):
        logging.info(
            f"Pixel {i}: SPDE {spde.value[i]:.4f}±{spde.stderr[i]:.4f}, "
            f"DCR {dcr.value[i]:.0f}±{dcr.stderr[i]:.0f} Hz, "
            f"APR {apr.value[i]:.4f}±{apr.stderr[i]:.4f}"
        )
    return CharacterizationReport(
        spde=spde,
        dcr_hz=dcr,
        apr=apr,
        crosstalk=CrosstalkMatrices(sync, sync_err, async_, async_err, low, aggressors),
        specificity=specificity,
        n_gates=int(n_gates),
        mean_photons=schedule.mean_photons,
    )
