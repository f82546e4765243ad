"""
Discrete-event Monte Carlo of a gated SPAD array.

The engine walks a heap of candidate avalanches ordered by gate index.
Photon and dark candidates come from independent Bernoulli streams sampled
with geometric gaps, so quiet stretches of gates cost nothing. An avalanche
sets the pixel dead (non-paralyzable), spawns afterpulse candidates from its
trap population and emits crosstalk stimuli toward every other pixel.
Candidates that land on a dead pixel are dropped.
"""

import heapq
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from ..utils.helpers import parallel_map
from ..utils.report_io import write_csv
from .config import ArrayConfig, DetectorConfig
from .exceptions import CancelledError, DomainError, ModelError
from .units import RngSpec

PHOTON, DARK, AFTERPULSE, CROSSTALK = 0, 1, 2, 3
CAUSE_NAMES = ("photon", "dark", "afterpulse", "crosstalk")
POLICIES = ("per-pixel", "universal")

MAX_GATES = 2**62
POLL_EVERY = 8192

EVENT_CSV_HEADER = ["gate_index", "pixel", "cause", "aggressor_pixel"]


@dataclass(frozen=True)
class CrosstalkStimulus:
    """Optical/electrical disturbance travelling from an aggressor to a victim."""

    arrival_time_ns: float
    source_pixel: int
    strength: float
    emission_time_ns: float = 0.0

    def __post_init__(self):
        if not self.arrival_time_ns > self.emission_time_ns:
            raise DomainError("Crosstalk stimulus must arrive after it is emitted")
        if not 0.0 <= self.strength < 1.0:
            raise DomainError(f"Crosstalk strength must lie in [0, 1), got {self.strength}")

    @property
    def delay_ns(self) -> float:
        return self.arrival_time_ns - self.emission_time_ns


@dataclass
class PixelState:
    """Mutable per-pixel state during a run."""

    spde_effective: float
    trap_charge: float = 0.0
    trap_gate: int = 0
    dead_until_gate: int = -1
    pending_stimuli: List[Tuple[float, int, CrosstalkStimulus]] = field(default_factory=list)

    def is_live(self, gate: int) -> bool:
        return gate > self.dead_until_gate

    def charge_at(self, gate: int, decay: float) -> float:
        """Trap population at `gate`, decayed from the last avalanche."""
        if self.trap_charge <= 0.0:
            return 0.0
        return self.trap_charge * decay ** (gate - self.trap_gate)

    def record_avalanche(self, gate: int, deadtime_gates: int, decay: float) -> None:
        self.trap_charge = self.charge_at(gate, decay) + 1.0
        self.trap_gate = gate
        self.dead_until_gate = max(self.dead_until_gate, gate + deadtime_gates)

    def push_stimulus(self, stimulus: CrosstalkStimulus, seq: int) -> None:
        heapq.heappush(self.pending_stimuli, (stimulus.arrival_time_ns, seq, stimulus))

    def resolve_stimulus(self, stimulus: CrosstalkStimulus) -> CrosstalkStimulus:
        """Take `stimulus` itself off the in-flight queue, wherever it sits."""
        for i, entry in enumerate(self.pending_stimuli):
            if entry[2] is stimulus:
                self.pending_stimuli[i] = self.pending_stimuli[-1]
                self.pending_stimuli.pop()
                heapq.heapify(self.pending_stimuli)
                return stimulus
        raise ModelError(f"Crosstalk stimulus from pixel {stimulus.source_pixel} was never queued")


def afterpulse_gate_probability(
    state: PixelState, det: DetectorConfig, gate: Optional[int] = None
) -> float:
    """
    Per-gate afterpulse hazard of a pixel.

    Each avalanche contributes trap charge decaying by exp(-T/tau) per gate.
    The normalization makes the hazard of one avalanche, summed over every
    gate after its dead time, equal afterpulse_total. The probability that a
    gate fires from afterpulsing alone is 1 - exp(-hazard).
    """
    decay = det.trap_decay_per_gate
    charge = state.trap_charge if gate is None else state.charge_at(gate, decay)
    if charge <= 0.0 or det.afterpulse_total <= 0.0:
        return 0.0
    offset = det.deadtime_gates + 1
    # norm = APR (1 - r) / r^(D+1), kept in log space
    log_hazard = math.log(charge) + offset * det.gate_period_ns / det.trap_tau_ns
    return det.afterpulse_total * (1.0 - decay) * math.exp(log_hazard)


@dataclass(frozen=True)
class IlluminationSchedule:
    """Periodic laser illumination: one gate in every `period_gates`."""

    period_gates: int = 64
    mean_photons: float = 0.2
    target_pixel: Optional[int] = None
    phase_gate: int = 0

    def __post_init__(self):
        if not isinstance(self.period_gates, (int, np.integer)) or self.period_gates < 1:
            raise DomainError(
                f"Illumination period must be an integer >= 1, got {self.period_gates}"
            )
        if not math.isfinite(self.mean_photons) or self.mean_photons < 0:
            raise DomainError(
                f"Mean photon number must be finite and >= 0, got {self.mean_photons}"
            )
        if not 0 <= self.phase_gate < self.period_gates:
            raise DomainError(f"Illumination phase must lie in [0, {self.period_gates})")
        if self.target_pixel is not None and self.target_pixel < 0:
            raise DomainError(f"Target pixel must be non-negative, got {self.target_pixel}")

    def illuminates(self, pixel: int) -> bool:
        return self.target_pixel is None or self.target_pixel == pixel

    def is_illuminated(self, gate: int) -> bool:
        return gate % self.period_gates == self.phase_gate

    def illuminated_count(self, n_gates: int) -> int:
        if n_gates <= self.phase_gate:
            return 0
        return (n_gates - 1 - self.phase_gate) // self.period_gates + 1

    def dark(self) -> "IlluminationSchedule":
        """Same gate slots with the laser blocked."""
        return replace(self, mean_photons=0.0)


class PhotonSource:
    """
    Stream(s) of gates that carry at least one detectable photon.

    The engine pops stream candidates in gate order and asks the source which
    pixels receive a photon in that gate.
    """

    def streams(self) -> Sequence[Any]:
        raise NotImplementedError

    def first_gate(self, rng: np.random.Generator, key: Any) -> Optional[int]:
        raise NotImplementedError

    def next_gate(self, rng: np.random.Generator, key: Any, gate: int) -> Optional[int]:
        raise NotImplementedError

    def emit(self, rng: np.random.Generator, key: Any, gate: int) -> Iterable[int]:
        raise NotImplementedError


class ScheduleSource(PhotonSource):
    """Laser pulses on illuminated gates, one stream per targeted pixel."""

    def __init__(self, schedule: IlluminationSchedule, array: ArrayConfig):
        self.schedule = schedule
        self._click = {}
        for pixel, det in enumerate(array.pixel_configs):
            if not schedule.illuminates(pixel):
                continue
            p = -math.expm1(-schedule.mean_photons * det.spde)
            if p > 0.0:
                self._click[pixel] = p

    def streams(self) -> Sequence[int]:
        return sorted(self._click)

    def first_gate(self, rng, pixel):
        k = int(rng.geometric(self._click[pixel])) - 1
        return self.schedule.phase_gate + k * self.schedule.period_gates

    def next_gate(self, rng, pixel, gate):
        return gate + int(rng.geometric(self._click[pixel])) * self.schedule.period_gates

    def emit(self, rng, pixel, gate):
        return (pixel,)


class GateEngine:
    """Event-driven gate loop shared by characterization runs and the BB84 link."""

    def __init__(
        self,
        array: ArrayConfig,
        rng: RngSpec,
        update_callback: Optional[Callable[[str], None]] = None,
        progress_callback: Optional[Callable[[int, int, float], None]] = None,
        cancel_event: Optional[Any] = None,
    ) -> None:
        self.array = array
        self.rng_spec = rng
        self.update_callback = update_callback
        self.progress_callback = progress_callback
        self.cancel_event = cancel_event

        self.rng = rng.generator()
        self.states = [PixelState(spde_effective=det.spde) for det in array.pixel_configs]
        self.n_pixels = array.n_pixels

        dets = array.pixel_configs
        self._deadtime = [det.deadtime_gates for det in dets]
        self._decay = [det.trap_decay_per_gate for det in dets]
        self._dark_click = [-math.expm1(-det.dark_per_gate) for det in dets]
        self._afterpulse = [det.afterpulse_total for det in dets]
        self._crosstalk = [list(row) for row in array.crosstalk_intrinsic]
        self._period = array.gate_period_ns
        self._width = array.gate_width_ns
        self._formation_tau = array.formation_tau_ns

        self._heap: List[tuple] = []
        self._seq = 0
        self._n_gates = 0
        self._events: List[Tuple[int, int, int, int]] = []

    def _push(self, gate: int, priority: int, pixel: int, payload=None, time_ns=0.0) -> None:
        heapq.heappush(self._heap, (gate, priority, time_ns, self._seq, pixel, payload))
        self._seq += 1

    def _check_cancel(self, gate: int, start_time: float) -> None:
        if self.cancel_event is not None and self.cancel_event.is_set():
            raise CancelledError(partial=gate)
        if self.progress_callback:
            self.progress_callback(gate, self._n_gates, start_time)

    def run(
        self, n_gates: int, sources: Sequence[PhotonSource]
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Simulate `n_gates` gates; returns (gate, pixel, cause, aggressor) arrays."""
        if not isinstance(n_gates, (int, np.integer)) or n_gates < 1:
            raise DomainError(f"n_gates must be an integer >= 1, got {n_gates}")
        if n_gates > MAX_GATES:
            raise ModelError(f"{n_gates} gates overflow the gate index space ({MAX_GATES})")
        self._n_gates = int(n_gates)
        rng = self.rng

        for source in sources:
            for key in source.streams():
                gate = source.first_gate(rng, key)
                if gate is not None and gate < n_gates:
                    self._push(gate, PHOTON, -1, (source, key))
        for pixel, q in enumerate(self._dark_click):
            if q > 0.0:
                gate = int(rng.geometric(q)) - 1
                if gate < n_gates:
                    self._push(gate, DARK, pixel)

        if self.update_callback:
            self.update_callback(f"Simulating {n_gates} gates on {self.n_pixels} pixel(s)")
        start_time = time.time()
        processed = 0
        while self._heap:
            gate, priority, _, _, pixel, payload = heapq.heappop(self._heap)
            if gate >= n_gates:
                break
            processed += 1
            if processed % POLL_EVERY == 0:
                self._check_cancel(gate, start_time)

            if priority == PHOTON:
                source, key = payload
                for target in source.emit(rng, key, gate):
                    self._trigger(gate, target, PHOTON)
                nxt = source.next_gate(rng, key, gate)
                if nxt is not None and nxt < n_gates:
                    self._push(nxt, PHOTON, -1, payload)
            elif priority == DARK:
                self._trigger(gate, pixel, DARK)
                nxt = gate + int(rng.geometric(self._dark_click[pixel]))
                if nxt < n_gates:
                    self._push(nxt, DARK, pixel)
            elif priority == AFTERPULSE:
                self._trigger(gate, pixel, AFTERPULSE)
            else:
                state = self.states[pixel]
                stimulus = state.resolve_stimulus(payload)
                if state.is_live(gate) and rng.random() < stimulus.strength:
                    self._trigger(gate, pixel, CROSSTALK, stimulus.source_pixel)

        self._heap.clear()
        if self.progress_callback:
            self.progress_callback(self._n_gates, self._n_gates, start_time)

        if self._events:
            events = np.asarray(self._events, dtype=np.int64)
            return events[:, 0], events[:, 1], events[:, 2].astype(np.int8), events[:, 3]
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), np.zeros(0, dtype=np.int8), empty.copy()

    def _trigger(self, gate: int, pixel: int, cause: int, aggressor: int = -1) -> bool:
        state = self.states[pixel]
        if not state.is_live(gate):
            return False
        state.record_avalanche(gate, self._deadtime[pixel], self._decay[pixel])
        self._events.append((gate, pixel, cause, aggressor))
        self._spawn_afterpulses(gate, pixel)
        self._emit_crosstalk(gate, pixel)
        return True

    def _spawn_afterpulses(self, gate: int, pixel: int) -> None:
        # Poisson superposition of the decaying trap hazard after the dead time
        total = self._afterpulse[pixel]
        if total <= 0.0:
            return
        rng = self.rng
        first = gate + self._deadtime[pixel] + 1
        escape = 1.0 - self._decay[pixel]
        for _ in range(int(rng.poisson(total))):
            candidate = first + int(rng.geometric(escape)) - 1
            if candidate < self._n_gates:
                self._push(candidate, AFTERPULSE, pixel)

    def _emit_crosstalk(self, gate: int, pixel: int) -> None:
        rng = self.rng
        emitted = gate * self._period + 0.5 * self._width
        for victim, strength in enumerate(self._crosstalk[pixel]):
            if victim == pixel or strength <= 0.0:
                continue
            delay = float(rng.exponential(self._formation_tau))
            offset = 0.5 * self._width + delay
            k = int(offset // self._period)
            if offset - k * self._period > self._width:
                continue
            target = gate + k
            if target >= self._n_gates:
                continue
            stimulus = CrosstalkStimulus(
                arrival_time_ns=emitted + delay,
                source_pixel=pixel,
                strength=strength,
                emission_time_ns=emitted,
            )
            self.states[victim].push_stimulus(stimulus, self._seq)
            self._push(target, CROSSTALK, victim, stimulus, stimulus.arrival_time_ns)


# Kernels over gate-sorted event arrays


@njit(cache=True)
def _blanking_mask(gates, pixels, deadtimes, n_pixels, universal):
    n = gates.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    dead_until = np.full(n_pixels, -1, dtype=np.int64)
    window_gate = -1
    window_end = -1
    for i in range(n):
        g = gates[i]
        p = pixels[i]
        if g <= dead_until[p]:
            continue
        if universal and g != window_gate and g <= window_end:
            continue
        keep[i] = True
        dead_until[p] = g + deadtimes[p]
        if universal:
            if g > window_end:
                window_gate = g
                window_end = g + deadtimes[p]
            elif g + deadtimes[p] > window_end:
                window_end = g + deadtimes[p]
    return keep


@njit(cache=True)
def _illuminated_in(a, b, period, phase):
    # gates x in (a, b] with x % period == phase; requires a >= -1
    if b <= a:
        return 0
    return (b - phase + period) // period - (a - phase + period) // period


@njit(cache=True)
def _dead_gate_counts(gates, pixels, deadtimes, n_pixels, n_gates, period, phase, universal):
    dead_total = np.zeros(n_pixels, dtype=np.int64)
    dead_ill = np.zeros(n_pixels, dtype=np.int64)
    covered = np.full(n_pixels, -1, dtype=np.int64)
    for i in range(gates.shape[0]):
        g = gates[i]
        p = pixels[i]
        end = min(g + deadtimes[p], n_gates - 1)
        lo = 0 if universal else p
        hi = n_pixels if universal else p + 1
        for q in range(lo, hi):
            start = max(g, covered[q])
            if end > start:
                dead_total[q] += end - start
                dead_ill[q] += _illuminated_in(start, end, period, phase)
                covered[q] = end
    return dead_total, dead_ill


@njit(cache=True)
def _pair_counts(gates, pixels, deadtimes, n_pixels):
    coincidences = np.zeros((n_pixels, n_pixels), dtype=np.int64)
    post_gate = np.zeros((n_pixels, n_pixels), dtype=np.int64)
    m = gates.shape[0]
    for i in range(m):
        a = pixels[i]
        g = gates[i]
        horizon = g + deadtimes[a]
        j = i + 1
        while j < m and gates[j] <= horizon:
            v = pixels[j]
            if v != a:
                if gates[j] == g:
                    coincidences[a, v] += 1
                    coincidences[v, a] += 1
                else:
                    post_gate[a, v] += 1
            j += 1
    return coincidences, post_gate


@dataclass(frozen=True)
class GateEventLog:
    """Avalanche record of one run with per-pixel tallies."""

    n_gates: int
    schedule: IlluminationSchedule
    deadtime_gates: np.ndarray
    policy: str
    event_gate: np.ndarray
    event_pixel: np.ndarray
    event_cause: np.ndarray
    event_aggressor: np.ndarray
    counts_illuminated: np.ndarray
    counts_dark_gates: np.ndarray
    counts_total: np.ndarray
    live_illuminated: np.ndarray
    live_dark_gates: np.ndarray
    coincidences: np.ndarray
    post_gate: np.ndarray
    gate_period_ns: float = 1.0

    @property
    def n_pixels(self) -> int:
        return int(self.deadtime_gates.shape[0])

    @property
    def n_gates_simulated(self) -> int:
        return self.n_gates

    @property
    def n_illuminated_gates(self) -> int:
        return self.schedule.illuminated_count(self.n_gates)

    @property
    def n_dark_gates(self) -> int:
        return self.n_gates - self.n_illuminated_gates

    def avalanche_gates(self, pixel: int) -> np.ndarray:
        return self.event_gate[self.event_pixel == pixel]

    def cause_counts(self) -> np.ndarray:
        """Cause-tagged avalanche counts, shape (n_pixels, 4). Not used by the blind estimators."""
        counts = np.zeros((self.n_pixels, len(CAUSE_NAMES)), dtype=np.int64)
        np.add.at(counts, (self.event_pixel, self.event_cause.astype(np.int64)), 1)
        return counts

    def tagged_crosstalk(self) -> np.ndarray:
        """Aggressor -> victim counts of crosstalk-caused avalanches (simulation ground truth)."""
        matrix = np.zeros((self.n_pixels, self.n_pixels), dtype=np.int64)
        mask = self.event_cause == CROSSTALK
        np.add.at(matrix, (self.event_aggressor[mask], self.event_pixel[mask]), 1)
        return matrix

    @classmethod
    def from_events(
        cls,
        n_gates: int,
        schedule: IlluminationSchedule,
        deadtime_gates: Sequence[int],
        gates,
        pixels,
        causes=None,
        aggressors=None,
        policy: str = "per-pixel",
        gate_period_ns: float = 1.0,
    ) -> "GateEventLog":
        """Build a log and all its tallies from raw avalanche records."""
        if policy not in POLICIES:
            raise DomainError(f"Unknown dead-time policy {policy!r}; choose from {POLICIES}")
        deadtimes = np.asarray(deadtime_gates, dtype=np.int64)
        n_pixels = int(deadtimes.shape[0])
        gates = np.asarray(gates, dtype=np.int64)
        pixels = np.asarray(pixels, dtype=np.int64)
        causes = (
            np.full(gates.shape[0], DARK, dtype=np.int8)
            if causes is None
            else np.asarray(causes, dtype=np.int8)
        )
        aggressors = (
            np.full(gates.shape[0], -1, dtype=np.int64)
            if aggressors is None
            else np.asarray(aggressors, dtype=np.int64)
        )
        if gates.shape[0] and (gates.min() < 0 or gates.max() >= n_gates):
            raise DomainError("Event gate indices must lie in [0, n_gates)")
        if pixels.shape[0] and (pixels.min() < 0 or pixels.max() >= n_pixels):
            raise DomainError("Event pixel indices must lie in [0, n_pixels)")

        order = np.argsort(gates, kind="stable")
        gates, pixels = gates[order], pixels[order]
        causes, aggressors = causes[order], aggressors[order]

        period, phase = schedule.period_gates, schedule.phase_gate
        illuminated = (gates - phase) % period == 0
        counts_total = np.bincount(pixels, minlength=n_pixels).astype(np.int64)
        counts_ill = np.bincount(pixels[illuminated], minlength=n_pixels).astype(np.int64)

        universal = policy == "universal"
        dead_total, dead_ill = _dead_gate_counts(
            gates, pixels, deadtimes, n_pixels, int(n_gates), period, phase, universal
        )
        n_ill = schedule.illuminated_count(n_gates)
        coincidences, post_gate = _pair_counts(gates, pixels, deadtimes, n_pixels)

        return cls(
            n_gates=int(n_gates),
            schedule=schedule,
            deadtime_gates=deadtimes,
            policy=policy,
            event_gate=gates,
            event_pixel=pixels,
            event_cause=causes,
            event_aggressor=aggressors,
            counts_illuminated=counts_ill,
            counts_dark_gates=counts_total - counts_ill,
            counts_total=counts_total,
            live_illuminated=n_ill - dead_ill,
            live_dark_gates=(n_gates - n_ill) - (dead_total - dead_ill),
            coincidences=coincidences,
            post_gate=post_gate,
            gate_period_ns=float(gate_period_ns),
        )

    def summary(self) -> dict:
        return {
            "n_gates": self.n_gates,
            "policy": self.policy,
            "counts_illuminated": self.counts_illuminated.tolist(),
            "counts_dark_gates": self.counts_dark_gates.tolist(),
            "counts_total": self.counts_total.tolist(),
            "live_illuminated": self.live_illuminated.tolist(),
            "live_dark_gates": self.live_dark_gates.tolist(),
            "coincidences": self.coincidences.tolist(),
            "post_gate": self.post_gate.tolist(),
        }


def deadtime_blanking(log: GateEventLog, policy: str = "per-pixel") -> GateEventLog:
    """
    Apply a counting dead-time policy to a log.

    per-pixel drops avalanches inside the same pixel's dead window. universal
    also drops every other pixel's avalanches in later gates of the window;
    avalanches sharing the blanking gate are kept.
    """
    if policy not in POLICIES:
        raise DomainError(f"Unknown dead-time policy {policy!r}; choose from {POLICIES}")
    if log.event_gate.shape[0] == 0:
        return replace(log, policy=policy) if policy != log.policy else log
    keep = _blanking_mask(
        log.event_gate, log.event_pixel, log.deadtime_gates, log.n_pixels, policy == "universal"
    )
    removed = int(keep.shape[0] - keep.sum())
    if removed:
        logging.debug(f"Dead-time policy {policy} removed {removed} avalanches")
    return GateEventLog.from_events(
        log.n_gates,
        log.schedule,
        log.deadtime_gates,
        log.event_gate[keep],
        log.event_pixel[keep],
        log.event_cause[keep],
        log.event_aggressor[keep],
        policy=policy,
        gate_period_ns=log.gate_period_ns,
    )


def counting_mask(
    gates: np.ndarray, pixels: np.ndarray, deadtimes: Sequence[int], n_pixels: int, policy: str
) -> np.ndarray:
    """Boolean mask of the gate-sorted avalanches a counting policy keeps."""
    if policy not in POLICIES:
        raise DomainError(f"Unknown dead-time policy {policy!r}; choose from {POLICIES}")
    if gates.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    return _blanking_mask(
        np.asarray(gates, dtype=np.int64),
        np.asarray(pixels, dtype=np.int64),
        np.asarray(deadtimes, dtype=np.int64),
        n_pixels,
        policy == "universal",
    )


def _check_schedule(array: ArrayConfig, schedule: IlluminationSchedule) -> None:
    if schedule.target_pixel is not None and schedule.target_pixel >= array.n_pixels:
        raise DomainError(
            f"Schedule targets pixel {schedule.target_pixel} but the array has "
            f"{array.n_pixels} pixel(s)"
        )


def run_gates(
    array: ArrayConfig,
    schedule: IlluminationSchedule,
    n_gates: int,
    rng: RngSpec,
    policy: Optional[str] = None,
    update_callback: Optional[Callable[[str], None]] = None,
    progress_callback: Optional[Callable[[int, int, float], None]] = None,
    cancel_event: Optional[Any] = None,
) -> GateEventLog:
    """Simulate a characterization run and return its event log."""
    _check_schedule(array, schedule)
    engine = GateEngine(
        array,
        rng,
        update_callback=update_callback,
        progress_callback=progress_callback,
        cancel_event=cancel_event,
    )
    gates, pixels, causes, aggressors = engine.run(n_gates, [ScheduleSource(schedule, array)])
    deadtimes = [det.deadtime_gates for det in array.pixel_configs]
    log = GateEventLog.from_events(
        n_gates,
        schedule,
        deadtimes,
        gates,
        pixels,
        causes,
        aggressors,
        policy="per-pixel",
        gate_period_ns=array.gate_period_ns,
    )
    if policy is None:
        policy = "universal" if array.universal_deadtime else "per-pixel"
    if policy == "universal":
        log = deadtime_blanking(log, "universal")
    logging.debug(
        f"run_gates: {n_gates} gates, {int(log.counts_total.sum())} avalanches "
        f"(stream {rng.stream_id}, lineage {rng.lineage})"
    )
    return log


def merge_logs(logs: Sequence[GateEventLog]) -> GateEventLog:
    """
    Concatenate independent runs end to end.

    Tallies are summed; event gates are offset so the merged record stays
    gate-sorted.
    """
    if not logs:
        raise DomainError("Nothing to merge")
    first = logs[0]
    offsets = np.cumsum([0] + [log.n_gates for log in logs[:-1]])

    def stack(name):
        return np.sum([getattr(log, name) for log in logs], axis=0)

    return replace(
        first,
        n_gates=int(sum(log.n_gates for log in logs)),
        event_gate=np.concatenate([log.event_gate + off for log, off in zip(logs, offsets)]),
        event_pixel=np.concatenate([log.event_pixel for log in logs]),
        event_cause=np.concatenate([log.event_cause for log in logs]),
        event_aggressor=np.concatenate([log.event_aggressor for log in logs]),
        counts_illuminated=stack("counts_illuminated"),
        counts_dark_gates=stack("counts_dark_gates"),
        counts_total=stack("counts_total"),
        live_illuminated=stack("live_illuminated"),
        live_dark_gates=stack("live_dark_gates"),
        coincidences=stack("coincidences"),
        post_gate=stack("post_gate"),
    )


def _run_trial(array, schedule, n_gates, rng, policy):
    return run_gates(array, schedule, n_gates, rng, policy=policy)


def run_trials(
    array: ArrayConfig,
    schedule: IlluminationSchedule,
    n_gates: int,
    rng: RngSpec,
    n_trials: int = 1,
    policy: Optional[str] = None,
    n_jobs: Optional[int] = None,
) -> GateEventLog:
    """
    Split `n_gates` into independent trials on substreams of `rng`, run them
    in a worker pool and merge. The result depends on `n_trials`, never on
    the number of workers.
    """
    if n_trials < 1:
        raise DomainError(f"n_trials must be >= 1, got {n_trials}")
    if n_trials == 1:
        return run_gates(array, schedule, n_gates, rng, policy=policy)
    if schedule.period_gates > 1:
        # keep every trial aligned to the illumination period
        chunk = (n_gates // n_trials) // schedule.period_gates * schedule.period_gates
    else:
        chunk = n_gates // n_trials
    if chunk < 1:
        raise DomainError(f"{n_gates} gates cannot be split into {n_trials} trials")
    sizes = [chunk] * (n_trials - 1) + [n_gates - chunk * (n_trials - 1)]
    jobs = [
        (array, schedule, size, rng.substream(i), policy) for i, size in enumerate(sizes)
    ]
    logs = parallel_map(_run_trial, jobs, n_jobs=n_jobs)
    return merge_logs(logs)


def dump_events_csv(log: GateEventLog, path: str) -> str:
    """Write one CSV record per avalanche; returns the file digest."""
    rows = (
        (int(g), int(p), CAUSE_NAMES[int(c)], int(a))
        for g, p, c, a in zip(
            log.event_gate, log.event_pixel, log.event_cause, log.event_aggressor
        )
    )
    return write_csv(path, EVENT_CSV_HEADER, rows)
