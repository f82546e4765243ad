"""
Unit conversions, shared math primitives and the random-number contract.

Random streams are counter-based (Philox) and addressed by seed, stream_id and
a lineage of substream indices, so every trial owns an independent substream
whatever order workers run in.
"""

import math
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from scipy.special import xlogy

from .exceptions import DomainError

ArrayLike = Union[float, np.ndarray]

SECONDS_PER_NS = 1e-9


def db_to_transmittance(loss_db: ArrayLike) -> ArrayLike:
    """Return the power transmittance 10^(-loss/10) of a loss given in dB."""
    values = np.asarray(loss_db, dtype=float)
    if not np.all(np.isfinite(values)):
        raise DomainError(f"Loss must be finite, got {loss_db!r}")
    result = np.power(10.0, -values / 10.0)
    if np.ndim(loss_db) == 0:
        return float(result)
    return result


def transmittance_to_db(transmittance: ArrayLike) -> ArrayLike:
    """Inverse of db_to_transmittance."""
    values = np.asarray(transmittance, dtype=float)
    if np.any(values <= 0) or not np.all(np.isfinite(values)):
        raise DomainError(f"Transmittance must be positive and finite, got {transmittance!r}")
    result = -10.0 * np.log10(values)
    if np.ndim(transmittance) == 0:
        return float(result)
    return result


def binary_entropy(p: ArrayLike) -> ArrayLike:
    """Shannon entropy in bits of a Bernoulli(p) variable; h(0) = h(1) = 0."""
    values = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(values)) or np.any(values < 0.0) or np.any(values > 1.0):
        raise DomainError(f"Entropy argument must lie in [0, 1], got {p!r}")
    result = -(xlogy(values, values) + xlogy(1.0 - values, 1.0 - values)) / math.log(2.0)
    if np.ndim(p) == 0:
        return float(result)
    return result


def dcr_per_gate(dcr_hz: float, gate_rate_ghz: float) -> float:
    """Dark counts expected per gate period: plain division of Hz by gate rate."""
    return dcr_hz * SECONDS_PER_NS / gate_rate_ghz


def deadtime_in_gates(deadtime_ns: float, gate_rate_ghz: float) -> int:
    """Whole gates blanked after an avalanche (rounded up, so the cap is never exceeded)."""
    gates = deadtime_ns * gate_rate_ghz
    return int(math.ceil(gates - 1e-9)) if gates > 0 else 0


@dataclass(frozen=True)
class RngSpec:
    """Address of one random substream."""

    seed: int = 0
    stream_id: int = 0
    lineage: Tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise DomainError(f"Seed must be a 64-bit unsigned integer, got {self.seed}")
        if int(self.stream_id) < 0:
            raise DomainError(f"stream_id must be non-negative, got {self.stream_id}")

    def generator(self) -> np.random.Generator:
        """Fresh Philox generator for this (seed, stream_id, lineage) address."""
        spawn_key = (int(self.stream_id),) + tuple(self.lineage)
        sequence = np.random.SeedSequence(int(self.seed), spawn_key=spawn_key)
        return np.random.Generator(np.random.Philox(sequence))

    def substream(self, index: int) -> "RngSpec":
        """Child stream for trial `index`; children of distinct parents never collide."""
        return RngSpec(self.seed, self.stream_id, tuple(self.lineage) + (int(index),))
