"""
Pulse-level Monte Carlo of the decoy-state BB84 link.

Alice repeats a pseudorandom pattern of (basis, bit, intensity) pulses, one
per detector gate. Photons that survive the channel and receiver reach one
of the two interferometer outputs and are detected by the corresponding
pixel of the shared SPAD engine, which adds dark counts, afterpulses,
crosstalk and dead time. Clicked gates are then sifted and tallied per
intensity class and basis.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..utils.helpers import format_duration, parallel_map, worker_count
from ..utils.report_io import write_csv
from .config import FiniteKeyConfig, ProtocolConfig
from .exceptions import CancelledError, DomainError, PartialBlockError
from .keyrate import CLASS_NAMES, BlockCounts, KeyRateReport, secure_key_length
from .link_model import OperatingPoint, majority_sifted_rate
from .spad_mc import GateEngine, PhotonSource, counting_mask
from .units import RngSpec

TRACE_HEADER = [
    "pattern_idx",
    "alice_basis",
    "alice_bit",
    "intensity",
    "bob_basis",
    "detector",
    "sifted",
    "error",
]
BASIS_NAMES = ("Z", "X")
DEFAULT_BATCHES = 8
DEFICIT_MARGIN = 1.02


@dataclass(frozen=True, eq=False)
class PulsePattern:
    """Alice's repeating pulse sequence. Basis 0 is the majority (key) basis."""

    basis: np.ndarray
    bit: np.ndarray
    intensity: np.ndarray
    seed: int = 0

    def __post_init__(self):
        n = self.basis.shape[0]
        if n == 0 or self.bit.shape[0] != n or self.intensity.shape[0] != n:
            raise DomainError("Pattern arrays must be nonempty and of equal length")

    def __len__(self) -> int:
        return int(self.basis.shape[0])

    @property
    def phase(self) -> np.ndarray:
        """Encoding phase: basis * pi/2 + bit * pi."""
        return self.basis * (math.pi / 2.0) + self.bit * math.pi

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.intensity, minlength=3)

    def class_fractions(self) -> np.ndarray:
        return self.class_counts() / len(self)

    def positions(self, intensity: int) -> np.ndarray:
        return np.flatnonzero(self.intensity == intensity)


def generate_pattern(protocol: ProtocolConfig, rng: RngSpec) -> PulsePattern:
    """Draw a pattern i.i.d. from the configured basis and intensity distributions."""
    gen = rng.generator()
    n = int(protocol.pattern_length)
    if n < 1:
        raise DomainError(f"pattern_length must be >= 1, got {n}")
    intensity = gen.choice(3, size=n, p=np.asarray(protocol.probabilities)).astype(np.int8)
    basis = (gen.random(n) >= protocol.basis_bias).astype(np.int8)
    bit = gen.integers(0, 2, size=n, dtype=np.int8)
    return PulsePattern(basis=basis, bit=bit, intensity=intensity, seed=rng.seed)


def _positive_poisson(rng: np.random.Generator, mean: float) -> int:
    # inversion of the zero-truncated Poisson law
    u = rng.random() * -math.expm1(-mean)
    k = 1
    term = mean * math.exp(-mean)
    cumulative = term
    while cumulative < u and k < 1000:
        k += 1
        term *= mean / k
        cumulative += term
    return k


class ProtocolSource(PhotonSource):
    """
    Photon arrivals from the repeating pattern, one stream per intensity class.

    Each stream walks the class's pattern positions with geometric gaps at
    the per-pulse probability of at least one photon detectable by the best
    pixel; the chosen pulses are then split over the two interferometer
    outputs and thinned to each pixel's own SPDE.
    """

    def __init__(self, pattern: PulsePattern, op: OperatingPoint):
        self.pattern = pattern
        self.period = len(pattern)
        self.bias = op.protocol.basis_bias
        self.visibility = op.receiver.visibility
        spdes = [det.spde for det in op.detectors.pixel_configs]
        eta_max = max(spdes)
        self._thin = [s / eta_max if eta_max > 0 else 0.0 for s in spdes]
        transmittance = op.gated_transmittance
        self._mean = {}
        self._click = {}
        self._positions = {}
        for k, mu in enumerate(op.protocol.intensities):
            positions = pattern.positions(k)
            mean = mu * transmittance * eta_max
            if positions.size and mean > 0.0:
                self._mean[k] = mean
                self._click[k] = -math.expm1(-mean)
                self._positions[k] = positions
        self._cursor = {}
        self.basis_gates: List[int] = []
        self.basis_choices: List[int] = []

    def streams(self) -> Sequence[int]:
        return sorted(self._click)

    def _gate(self, k: int) -> int:
        positions = self._positions[k]
        repeat, i = divmod(self._cursor[k], positions.shape[0])
        return repeat * self.period + int(positions[i])

    def first_gate(self, rng, k):
        self._cursor[k] = int(rng.geometric(self._click[k])) - 1
        return self._gate(k)

    def next_gate(self, rng, k, gate):
        self._cursor[k] += int(rng.geometric(self._click[k]))
        return self._gate(k)

    def emit(self, rng, k, gate):
        idx = gate % self.period
        photons = _positive_poisson(rng, self._mean[k])
        bob = 0 if rng.random() < self.bias else 1
        self.basis_gates.append(gate)
        self.basis_choices.append(bob)
        delta = self.pattern.phase[idx] - bob * (math.pi / 2.0)
        to_first = 0.5 * (1.0 + self.visibility * math.cos(delta))
        first = int(rng.binomial(photons, min(max(to_first, 0.0), 1.0)))
        fired = []
        for pixel, n in enumerate((first, photons - first)):
            if n > 0 and rng.binomial(n, self._thin[pixel]) > 0:
                fired.append(pixel)
        return fired


@dataclass(frozen=True)
class SiftedBlock:
    """Sifted counts of a run plus per-class detection tallies and an optional trace."""

    counts: BlockCounts
    detections: Tuple[int, int, int]
    emitted: Tuple[int, int, int]
    repeats: int
    trace: Optional[np.ndarray] = field(default=None, compare=False)

    @property
    def gains(self) -> Tuple[float, float, float]:
        return tuple(d / e if e > 0 else 0.0 for d, e in zip(self.detections, self.emitted))

    @property
    def errors(self) -> Tuple[float, float, float]:
        c = self.counts
        out = []
        for k in range(3):
            n = c.n_z[k] + c.n_x[k]
            out.append((c.m_z[k] + c.m_x[k]) / n if n > 0 else 0.0)
        return tuple(out)

    @property
    def qber(self) -> float:
        c = self.counts
        n = c.sifted_z + c.sifted_x
        return (sum(c.m_z) + sum(c.m_x)) / n if n > 0 else 0.0

    @property
    def sifted_bits(self) -> float:
        return self.counts.sifted_z

    def __add__(self, other: "SiftedBlock") -> "SiftedBlock":
        trace = None
        if self.trace is not None and other.trace is not None:
            trace = np.concatenate([self.trace, other.trace])
        return SiftedBlock(
            counts=self.counts + other.counts,
            detections=tuple(a + b for a, b in zip(self.detections, other.detections)),
            emitted=tuple(a + b for a, b in zip(self.emitted, other.emitted)),
            repeats=self.repeats + other.repeats,
            trace=trace,
        )

    def to_dict(self) -> dict:
        return {
            "counts": self.counts.to_dict(),
            "detections": dict(zip(CLASS_NAMES, self.detections)),
            "emitted": dict(zip(CLASS_NAMES, self.emitted)),
            "gains": dict(zip(CLASS_NAMES, self.gains)),
            "qber": self.qber,
            "repeats": self.repeats,
        }

    def dump_trace(self, path: str) -> str:
        """Write the clicked-pulse trace as CSV; returns the file digest."""
        if self.trace is None:
            raise DomainError("Block was simulated without a trace")
        rows = (
            (
                int(r[0]),
                BASIS_NAMES[int(r[1])],
                int(r[2]),
                CLASS_NAMES[int(r[3])],
                BASIS_NAMES[int(r[4])],
                int(r[5]),
                int(r[6]),
                int(r[7]),
            )
            for r in self.trace
        )
        return write_csv(path, TRACE_HEADER, rows)


def simulate_block(
    pattern: PulsePattern,
    op: OperatingPoint,
    n_repeats: int,
    rng: RngSpec,
    with_trace: bool = False,
    update_callback: Optional[Callable[[str], None]] = None,
    progress_callback: Optional[Callable[[int, int, float], None]] = None,
    cancel_event: Optional[Any] = None,
) -> SiftedBlock:
    """Run `n_repeats` passes of the pattern through the link and sift."""
    if not isinstance(n_repeats, (int, np.integer)) or n_repeats < 1:
        raise DomainError(f"n_repeats must be an integer >= 1, got {n_repeats}")
    period = len(pattern)
    n_gates = int(n_repeats) * period
    source = ProtocolSource(pattern, op)
    engine = GateEngine(
        op.detectors,
        rng,
        update_callback=update_callback,
        progress_callback=progress_callback,
        cancel_event=cancel_event,
    )
    gates, pixels, _, _ = engine.run(n_gates, [source])
    if op.detectors.universal_deadtime:
        deadtimes = [det.deadtime_gates for det in op.detectors.pixel_configs]
        keep = counting_mask(gates, pixels, deadtimes, 2, "universal")
        gates, pixels = gates[keep], pixels[keep]

    clicked, inverse = np.unique(gates, return_inverse=True)
    fired = np.zeros((clicked.shape[0], 2), dtype=bool)
    fired[inverse, pixels] = True

    post = rng.substream(0).generator()
    n = clicked.shape[0]
    idx = clicked % period
    cls = pattern.intensity[idx]
    alice_basis = pattern.basis[idx]
    alice_bit = pattern.bit[idx]

    # noise-only gates never reached the source, so Bob's basis is drawn here
    bob_basis = (post.random(n) >= op.protocol.basis_bias).astype(np.int8)
    recorded = np.asarray(source.basis_gates, dtype=np.int64)
    if recorded.size:
        pos = np.searchsorted(recorded, clicked)
        pos_clipped = np.minimum(pos, recorded.size - 1)
        found = (pos < recorded.size) & (recorded[pos_clipped] == clicked)
        bob_basis[found] = np.asarray(source.basis_choices, dtype=np.int8)[pos_clipped[found]]

    coin = post.random(n) < 0.5
    both = fired[:, 0] & fired[:, 1]
    detector = np.where(fired[:, 0], 0, 1).astype(np.int8)
    detector[both] = np.where(coin[both], 0, 1)

    sifted = bob_basis == alice_basis
    error = sifted & (detector != alice_bit)

    n_z, m_z, n_x, m_x = [], [], [], []
    for k in range(3):
        in_class = cls == k
        for basis, n_out, m_out in ((0, n_z, m_z), (1, n_x, m_x)):
            sel = in_class & sifted & (alice_basis == basis)
            n_out.append(float(np.count_nonzero(sel)))
            m_out.append(float(np.count_nonzero(sel & error)))
    detections = tuple(int(np.count_nonzero(cls == k)) for k in range(3))
    emitted = tuple(int(c) * int(n_repeats) for c in pattern.class_counts())

    trace = None
    if with_trace:
        trace = np.column_stack(
            [idx, alice_basis, alice_bit, cls, bob_basis, detector, sifted, error]
        ).astype(np.int64)

    counts = BlockCounts(
        tuple(n_z),
        tuple(m_z),
        tuple(n_x),
        tuple(m_x),
        duration_s=n_gates / op.pulse_rate_hz,
        pulses=float(n_gates),
    )
    return SiftedBlock(counts, detections, emitted, int(n_repeats), trace)


def _block_job(pattern, op, n_repeats, rng):
    return simulate_block(pattern, op, n_repeats, rng)


def _deficit_round(total: SiftedBlock, block_bits: float, max_batches: int) -> Tuple[int, int]:
    """Batches and repeats per batch covering the missing bits at the observed yield."""
    per_repeat = total.sifted_bits / total.repeats
    needed = int(math.ceil(DEFICIT_MARGIN * (block_bits - total.sifted_bits) / per_repeat))
    n_batches = max(1, min(max_batches, needed))
    return n_batches, max(1, int(math.ceil(needed / n_batches)))


def run_to_block_size(
    op: OperatingPoint,
    fk: FiniteKeyConfig,
    rng: RngSpec,
    pattern: Optional[PulsePattern] = None,
    repeats_per_batch: Optional[int] = None,
    batches_per_round: int = DEFAULT_BATCHES,
    n_jobs: Optional[int] = None,
    asymptotic: bool = False,
    update_callback: Optional[Callable[[str], None]] = None,
    progress_callback: Optional[Callable[[int, int, float], None]] = None,
    cancel_event: Optional[Any] = None,
) -> Tuple[SiftedBlock, KeyRateReport]:
    """
    Accumulate pattern repeats until the majority-basis sifted bits reach
    `fk.block_bits`, then evaluate the finite key.

    Batches run in rounds on substreams of `rng`, so the result depends on
    the batch size and never on the number of workers. The first round is
    sized from the analytic rate; later rounds cover only the missing bits
    at the observed yield per repeat. The link duration is re-projected
    after every round; a projection over `fk.max_block_seconds` raises
    PartialBlockError.
    """
    if pattern is None:
        pattern = generate_pattern(op.protocol, rng.substream(0))
    period = len(pattern)
    expected_rate = majority_sifted_rate(op)
    if expected_rate <= 0:
        raise PartialBlockError(math.inf, fk.max_block_seconds)
    projected = fk.block_bits / expected_rate
    if projected > fk.max_block_seconds:
        raise PartialBlockError(projected, fk.max_block_seconds)
    if repeats_per_batch is None:
        pulses = projected * op.pulse_rate_hz
        repeats_per_batch = max(1, int(math.ceil(pulses / (period * batches_per_round))))
    workers = min(worker_count(n_jobs), batches_per_round)

    if update_callback:
        update_callback(
            f"Accumulating {fk.block_bits:.3g} sifted bits "
            f"(projected {format_duration(projected)} of link time)"
        )
    start_time = time.time()
    total: Optional[SiftedBlock] = None
    round_index = 0
    next_stream = 1
    n_batches = batches_per_round
    while total is None or total.sifted_bits < fk.block_bits:
        if cancel_event is not None and cancel_event.is_set():
            raise CancelledError(partial=total)
        jobs = [
            (pattern, op, repeats_per_batch, rng.substream(next_stream + i))
            for i in range(n_batches)
        ]
        next_stream += n_batches
        for block in parallel_map(_block_job, jobs, n_jobs=workers):
            total = block if total is None else total + block
        round_index += 1
        elapsed_link = total.counts.duration_s
        if total.sifted_bits > 0:
            projected = fk.block_bits * elapsed_link / total.sifted_bits
        else:
            projected = math.inf
        logging.debug(
            f"Round {round_index}: {total.sifted_bits:.0f} sifted bits, "
            f"projected {format_duration(projected)}"
        )
        if progress_callback:
            done = int(min(total.sifted_bits, fk.block_bits))
            progress_callback(done, int(fk.block_bits), start_time)
        if projected > fk.max_block_seconds:
            raise PartialBlockError(projected, fk.max_block_seconds, total.sifted_bits)
        if total.sifted_bits < fk.block_bits:
            n_batches, repeats_per_batch = _deficit_round(total, fk.block_bits, batches_per_round)

    report = secure_key_length(total.counts, op.protocol, fk, asymptotic=asymptotic)
    logging.info(
        f"Block of {total.sifted_bits:.0f} sifted bits: QBER {total.counts.qber_z:.4%}, "
        f"secure rate {report.secure_rate_hz:.4g} bit/s"
    )
    return total, report
