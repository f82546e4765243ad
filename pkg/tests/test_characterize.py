import math
from dataclasses import replace

import numpy as np
import pytest

from src.backend.characterize import (
    BiasCurve,
    SpecificityResult,
    balance_biases,
    bias_sweep,
    characterize_array,
    coupling_loss,
    crosstalk_window_fractions,
    efficiency_mismatch,
    estimate_apr,
    estimate_dcr,
    estimate_spde,
    measure_crosstalk,
    specificity_matrix,
)
from src.backend.config import ArrayConfig, DetectorConfig
from src.backend.exceptions import BiasTargetError, DomainError, ModelError
from src.backend.spad_mc import GateEventLog, IlluminationSchedule, run_gates
from src.backend.units import RngSpec

from .conftest import pixel_pair, single_pixel

TABLE_ROWS = [
    (0.1025, 1.97, 0.170, 0.22),
    (0.1036, 0.72, 0.143, 0.68),
    (0.1027, 0.89, 0.138, 0.40),
    (0.1042, 1.15, 0.143, 0.22),
]


@pytest.fixture(autouse=True)
def serial_pool(monkeypatch):
    monkeypatch.setenv("QKDSIM_THREADS", "1")


@pytest.mark.parametrize("system, loss_db, spad, expected", TABLE_ROWS)
def test_coupling_loss_table(system, loss_db, spad, expected):
    assert coupling_loss(system, loss_db, spad) == pytest.approx(expected, abs=0.01)


def test_coupling_loss_first_device_exact():
    assert coupling_loss(0.1025, 1.97, 0.170) == pytest.approx(0.2273, abs=5e-4)


def test_coupling_loss_identity_and_scaling():
    assert coupling_loss(0.12, 0.0, 0.12) == 0.0
    base = coupling_loss(0.1036, 0.72, 0.143)
    assert coupling_loss(0.1036 * 0.5, 0.72, 0.143 * 0.5) == pytest.approx(base, abs=1e-12)


def test_coupling_loss_rejects_inverted_inputs():
    with pytest.raises(DomainError):
        coupling_loss(0.2, 1.0, 0.1)
    with pytest.raises(DomainError):
        coupling_loss(0.1, math.nan, 0.2)


def test_negative_coupling_loss_warns(caplog):
    with caplog.at_level("WARNING"):
        loss = coupling_loss(0.10, 3.0, 0.15)
    assert loss < 0
    assert "Negative coupling loss" in caplog.text


def _linear_curve(top=0.20):
    return BiasCurve(bias_v=(0.0, 10.0, 20.0), spde=(0.0, top / 2, top))


def test_balance_table_losses():
    losses = [1.97, 0.72, 0.89, 1.15]
    result = balance_biases([_linear_curve()] * 4, losses, 0.10)
    np.testing.assert_allclose(result.system_spde, 0.10, rtol=1e-9)
    assert result.mismatch < 0.01
    assert result.biases[0] > result.biases[1]


def test_balance_identical_curves_no_loss():
    result = balance_biases([_linear_curve()] * 3, [0.0, 0.0, 0.0], 0.12)
    assert len(set(result.biases)) == 1
    assert result.mismatch == 0.0


def test_balance_unreachable_target_names_pixel():
    curves = [_linear_curve(), _linear_curve(top=0.12)]
    with pytest.raises(BiasTargetError) as info:
        balance_biases(curves, [0.0, 3.0], 0.10)
    assert info.value.pixel == 1
    assert info.value.needed == pytest.approx(0.1995, abs=1e-4)
    assert info.value.achievable == (0.0, 0.12)


def test_balance_is_permutation_equivariant():
    curves = [_linear_curve(), BiasCurve(bias_v=(0.0, 30.0), spde=(0.05, 0.25))]
    losses = [1.0, 2.0]
    forward = balance_biases(curves, losses, 0.1)
    backward = balance_biases(curves[::-1], losses[::-1], 0.1)
    assert forward.biases == pytest.approx(backward.biases[::-1])


def test_bias_curve_validation():
    with pytest.raises(DomainError):
        BiasCurve(bias_v=(0.0, 1.0), spde=(0.2, 0.1))
    with pytest.raises(DomainError):
        BiasCurve(bias_v=(1.0, 0.0), spde=(0.1, 0.2))
    curve = BiasCurve.from_dict({"bias_v": [0, 10], "spde": [0.0, 0.2], "dcr_hz": [100, 900]})
    assert curve.bias_for(0.1) == pytest.approx(5.0)
    assert curve.dcr_at(5.0) == pytest.approx(500.0)
    assert curve.apr_at(5.0) is None


def test_bias_sweep_uses_tables():
    curve = BiasCurve(
        bias_v=(0.0, 10.0), spde=(0.1, 0.2), dcr_hz=(1000.0, 3000.0), apr=(0.01, 0.03)
    )
    rows = bias_sweep(curve, DetectorConfig(), biases=[0.0, 5.0, 10.0])
    assert [r["spde"] for r in rows] == pytest.approx([0.1, 0.15, 0.2])
    assert rows[1]["dcr_hz"] == pytest.approx(2000.0)
    assert rows[2]["afterpulse_total"] == pytest.approx(0.03)
    fixed = bias_sweep(BiasCurve(bias_v=(0.0, 1.0), spde=(0.1, 0.2)), DetectorConfig(dcr_hz=42.0))
    assert all(r["dcr_hz"] == 42.0 for r in fixed)


def test_efficiency_mismatch():
    assert efficiency_mismatch([0.1]) == 0.0
    assert efficiency_mismatch([0.1, 0.1]) == 0.0
    assert efficiency_mismatch([0.09, 0.11]) == pytest.approx(0.2)


def test_window_fractions():
    sync, later = crosstalk_window_fractions(0.4, 1.0, 2.5)
    assert sync == pytest.approx(0.0769, abs=1e-4)
    assert later == pytest.approx(0.3256, abs=1e-4)
    sync, later = crosstalk_window_fractions(10.0, 10.0, 2.5)
    assert sync == pytest.approx(1.0 - math.exp(-2.0))
    assert sync + later == pytest.approx(1.0)
    wider, _ = crosstalk_window_fractions(0.8, 1.0, 2.5)
    assert wider > crosstalk_window_fractions(0.4, 1.0, 2.5)[0]


def test_spde_forward_inversion():
    # P_ill = 1 - (1 - P_dark) exp(-mu eta) inverted exactly
    mu, eta, p_dark = 0.2, 0.15, 1e-3
    p_ill = 1.0 - (1.0 - p_dark) * math.exp(-mu * eta)
    n_ill, n_dark = 1_000_000, 63_000_000
    log = _log_with_fractions(p_ill, p_dark, n_ill, n_dark)
    estimate = estimate_spde(log, IlluminationSchedule(period_gates=64, mean_photons=mu))
    assert estimate.value[0] == pytest.approx(eta, rel=1e-3)
    assert not estimate.flags[0]


def _log_with_fractions(p_ill, p_dark, n_ill, n_dark):
    # tallies only; the estimator never looks at the event arrays
    schedule = IlluminationSchedule(period_gates=64, mean_photons=0.2)
    empty = GateEventLog.from_events(n_ill * 64, schedule, [0], gates=[], pixels=[])
    return replace(
        empty,
        counts_illuminated=np.array([round(p_ill * n_ill)]),
        counts_dark_gates=np.array([round(p_dark * n_dark)]),
        counts_total=np.array([round(p_ill * n_ill) + round(p_dark * n_dark)]),
        live_illuminated=np.array([n_ill]),
        live_dark_gates=np.array([n_dark]),
    )


def test_spde_nonphysical_is_flagged():
    log = _log_with_fractions(1e-3, 2e-3, 100_000, 6_300_000)
    estimate = estimate_spde(log, IlluminationSchedule(period_gates=64, mean_photons=0.2))
    assert estimate.value[0] == 0.0
    assert estimate.flags[0]


def test_spde_needs_dark_gates(rng):
    schedule = IlluminationSchedule(period_gates=1, mean_photons=0.2)
    log = run_gates(single_pixel(spde=0.15), schedule, 1000, rng)
    with pytest.raises(ModelError):
        estimate_spde(log, schedule)
    with pytest.raises(DomainError):
        estimate_spde(log, schedule.dark())


def test_spde_recovered_blind(rng):
    array = single_pixel(spde=0.15, dcr_hz=2000.0, deadtime_ns=100.0)
    schedule = IlluminationSchedule(period_gates=64, mean_photons=0.2)
    log = run_gates(array, schedule, 20_000_000, rng)
    estimate = estimate_spde(log, schedule)
    assert abs(estimate.value[0] - 0.15) < 4 * estimate.stderr[0]


def test_spde_unilluminated_pixel_is_nan(rng):
    schedule = IlluminationSchedule(period_gates=8, mean_photons=0.5, target_pixel=0)
    log = run_gates(pixel_pair(dcr_hz=5e5), schedule, 200_000, rng)
    estimate = estimate_spde(log, schedule)
    assert estimate.value[0] > 0
    assert math.isnan(estimate.value[1])


def test_dcr_recovered_blind(rng):
    array = single_pixel(dcr_hz=1e6, deadtime_ns=100.0)
    schedule = IlluminationSchedule(period_gates=64, mean_photons=0.0)
    log = run_gates(array, schedule, 4_000_000, rng)
    dark = estimate_dcr(log, schedule)
    assert dark.quiet_gates[0] > 0
    assert abs(dark.hz[0] - 1e6) < 4 * dark.stderr_hz[0]


def test_apr_recovered_blind(rng):
    array = single_pixel(afterpulse_total=0.04, deadtime_ns=100.0, trap_tau_ns=50.0)
    schedule = IlluminationSchedule(period_gates=64, mean_photons=0.1054)
    log = run_gates(array, schedule, 10_000_000, rng)
    estimate = estimate_apr(log, schedule)
    assert not estimate.flags[0]
    assert abs(estimate.value[0] - 0.04) < 4 * estimate.stderr[0]


def test_no_afterpulsing_reads_near_zero(rng):
    array = single_pixel(dcr_hz=1e5, deadtime_ns=100.0)
    schedule = IlluminationSchedule(period_gates=64, mean_photons=0.1054)
    log = run_gates(array, schedule, 4_000_000, rng)
    estimate = estimate_apr(log, schedule)
    assert estimate.value[0] < 4 * estimate.stderr[0]


def test_crosstalk_off_reads_zero(rng):
    schedule = IlluminationSchedule(period_gates=4, mean_photons=0.5, target_pixel=0)
    log = run_gates(pixel_pair(dcr_hz=2e4, deadtime_ns=20.0), schedule, 400_000, rng)
    matrices = measure_crosstalk(log)
    assert matrices.sync[0, 1] < 3 * max(matrices.sync_err[0, 1], 1e-4)
    assert matrices.async_[0, 1] < 3 * max(matrices.async_err[0, 1], 1e-4)


def test_low_aggressor_counts_flagged(rng):
    schedule = IlluminationSchedule(period_gates=4, mean_photons=0.5, target_pixel=0)
    log = run_gates(pixel_pair(), schedule, 2000, rng)
    assert measure_crosstalk(log).low_confidence[0, 1]


def test_specificity_from_rates():
    result = SpecificityResult(
        rates_hz=np.array([[1000.0, 10.0], [20.0, 2000.0]]),
        rates_err_hz=np.zeros((2, 2)),
    )
    np.testing.assert_allclose(result.leakage, [[1.0, 0.01], [0.01, 1.0]])
    assert result.specificity == pytest.approx(100.0)


def test_spde_never_falls_with_bias(rng):
    curve = BiasCurve(bias_v=(55.0, 57.0, 58.0, 60.0), spde=(0.0, 0.12, 0.12, 0.25))
    grid = np.linspace(54.0, 61.0, 71)
    values = [curve.spde_at(v) for v in grid]
    assert np.all(np.diff(values) >= 0.0)
    targets = [0.05, 0.12, 0.2]
    assert np.all(np.diff([curve.bias_for(t) for t in targets]) > 0.0)

    schedule = IlluminationSchedule(period_gates=4, mean_photons=0.2)
    rows = bias_sweep(curve, DetectorConfig(dcr_hz=0.0), biases=[56.0, 57.5, 59.0, 60.0])
    counts = [
        run_gates(single_pixel(spde=row["spde"]), schedule, 200_000, rng).counts_illuminated[0]
        for row in rows
    ]
    assert counts == sorted(counts)


def test_specificity_of_a_blind_pixel():
    result = SpecificityResult(
        rates_hz=np.array([[1000.0, 10.0], [20.0, 0.0]]),
        rates_err_hz=np.zeros((2, 2)),
    )
    assert result.specificity == 0.0
    dark = SpecificityResult(rates_hz=np.zeros((2, 2)), rates_err_hz=np.zeros((2, 2)))
    assert dark.specificity == 0.0
    assert dark.to_dict()["specificity"] == 0.0


def test_specificity_without_crosstalk(rng):
    schedule = IlluminationSchedule(period_gates=1, mean_photons=0.2)
    result = specificity_matrix(pixel_pair(), schedule, 20_000, rng)
    assert result.rates_hz[0, 0] > 0
    assert result.rates_hz[0, 1] == 0.0
    assert result.specificity == math.inf


def test_specificity_collapses_with_strong_crosstalk(rng):
    det = DetectorConfig(
        spde=0.5,
        dcr_hz=0.0,
        afterpulse_total=0.0,
        deadtime_ns=0.0,
        gate_rate_ghz=0.1,
        gate_width_ps=10_000.0,
    )

    array = ArrayConfig(pixel_configs=(det, det), crosstalk_intrinsic=((0.0, 0.5), (0.5, 0.0)))
    schedule = IlluminationSchedule(period_gates=1, mean_photons=0.2)
    result = specificity_matrix(array, schedule, 50_000, rng)
    assert result.specificity < 100


def test_characterize_array_report(rng):
    array = pixel_pair(crosstalk=0.001, dcr_hz=2e4, afterpulse_total=0.02, deadtime_ns=100.0)
    schedule = IlluminationSchedule(period_gates=64, mean_photons=0.2)
    report = characterize_array(array, schedule, 2_000_000, RngSpec(seed=5))
    payload = report.to_dict()
    assert payload["n_gates"] == 2_000_000
    assert len(payload["spde"]["value"]) == 2
    for i in range(2):
        assert abs(report.spde.value[i] - 0.15) < 5 * report.spde.stderr[i]
    assert report.specificity is not None
    assert report.crosstalk.sync.shape == (2, 2)


@pytest.mark.slow
def test_estimators_shrink_with_more_gates():
    array = single_pixel(spde=0.15, dcr_hz=1930.0, afterpulse_total=0.0223, deadtime_ns=100.0)
    schedule = IlluminationSchedule(period_gates=64, mean_photons=0.2)
    small = estimate_spde(run_gates(array, schedule, 10_000_000, RngSpec(seed=1)), schedule)
    large = estimate_spde(run_gates(array, schedule, 100_000_000, RngSpec(seed=2)), schedule)
    assert large.stderr[0] == pytest.approx(small.stderr[0] / math.sqrt(10), rel=0.1)
    assert abs(large.value[0] - 0.15) < 3 * large.stderr[0]


@pytest.mark.slow
def test_blind_pipeline_recovers_cold_pixel():
    array = single_pixel(spde=0.15, dcr_hz=1930.0, afterpulse_total=0.0223, deadtime_ns=100.0)
    schedule = IlluminationSchedule(period_gates=64, mean_photons=0.2)
    report = characterize_array(
        array, schedule, 100_000_000, RngSpec(seed=11), n_trials=8, with_specificity=False
    )
    assert abs(report.spde.value[0] - 0.15) < 3 * report.spde.stderr[0]
    assert abs(report.dcr_hz.value[0] - 1930.0) < 3 * report.dcr_hz.stderr[0]
    assert abs(report.apr.value[0] - 0.0223) < 3 * report.apr.stderr[0]
