import math

import numpy as np
import pytest

from src.backend.exceptions import DomainError
from src.backend.units import (
    RngSpec,
    binary_entropy,
    db_to_transmittance,
    dcr_per_gate,
    deadtime_in_gates,
    transmittance_to_db,
)


def test_db_to_transmittance_values():
    assert db_to_transmittance(0.0) == 1.0
    assert db_to_transmittance(10.0) == pytest.approx(0.1)
    assert db_to_transmittance(19.2) == pytest.approx(0.012023, rel=1e-4)


def test_db_to_transmittance_array_and_inverse():
    losses = np.array([0.0, 3.0, 22.5])
    back = transmittance_to_db(db_to_transmittance(losses))
    np.testing.assert_allclose(back, losses, atol=1e-12)


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_db_to_transmittance_rejects_non_finite(bad):
    with pytest.raises(DomainError):
        db_to_transmittance(bad)


def test_transmittance_to_db_rejects_zero():
    with pytest.raises(DomainError):
        transmittance_to_db(0.0)


def test_binary_entropy_endpoints_and_peak():
    assert binary_entropy(0.0) == 0.0
    assert binary_entropy(1.0) == 0.0
    assert binary_entropy(0.5) == pytest.approx(1.0)
    assert binary_entropy(0.11) == pytest.approx(0.49992, abs=1e-4)


def test_binary_entropy_is_symmetric():
    p = np.linspace(0.0, 1.0, 41)
    np.testing.assert_allclose(binary_entropy(p), binary_entropy(1.0 - p), atol=1e-12)


@pytest.mark.parametrize("bad", [-0.01, 1.01, math.nan])
def test_binary_entropy_domain(bad):
    with pytest.raises(DomainError):
        binary_entropy(bad)


def test_gate_conversions():
    assert dcr_per_gate(1930.0, 1.0) == pytest.approx(1.93e-6)
    assert deadtime_in_gates(100.0, 1.0) == 100
    assert deadtime_in_gates(100.0, 0.1) == 10
    assert deadtime_in_gates(0.0, 1.0) == 0
    assert deadtime_in_gates(2.5, 1.0) == 3


def test_rng_streams_are_reproducible_and_distinct():
    spec = RngSpec(seed=7)
    a = spec.generator().random(5)
    b = RngSpec(seed=7).generator().random(5)
    np.testing.assert_array_equal(a, b)
    child = spec.substream(0).generator().random(5)
    other = spec.substream(1).generator().random(5)
    assert not np.array_equal(a, child)
    assert not np.array_equal(child, other)
    assert spec.substream(1).substream(0) != spec.substream(0).substream(1)


def test_rng_rejects_negative_seed():
    with pytest.raises(DomainError):
        RngSpec(seed=-1)
