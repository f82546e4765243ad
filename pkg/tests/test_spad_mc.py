import math

import numpy as np
import pytest

from src.backend.characterize import crosstalk_window_fractions, measure_crosstalk
from src.backend.config import ArrayConfig, DetectorConfig
from src.backend.exceptions import CancelledError, DomainError, ModelError
from src.backend.spad_mc import (
    CROSSTALK,
    EVENT_CSV_HEADER,
    CrosstalkStimulus,
    GateEngine,
    GateEventLog,
    IlluminationSchedule,
    PixelState,
    ScheduleSource,
    afterpulse_gate_probability,
    counting_mask,
    deadtime_blanking,
    dump_events_csv,
    merge_logs,
    run_gates,
    run_trials,
)
from src.backend.units import RngSpec
from src.utils.report_io import read_csv_rows

from .conftest import pixel_pair, single_pixel


def test_click_fraction_matches_poisson(rng):
    schedule = IlluminationSchedule(period_gates=1, mean_photons=0.03)
    n = 200_000
    log = run_gates(single_pixel(), schedule, n, rng)
    p = -math.expm1(-0.03)
    sigma = math.sqrt(p * (1 - p) / n)
    assert abs(log.counts_total[0] / n - p) < 4 * sigma


def test_no_stimulus_no_clicks(rng):
    schedule = IlluminationSchedule(period_gates=1, mean_photons=0.0)
    log = run_gates(single_pixel(afterpulse_total=0.05, deadtime_ns=10.0), schedule, 50_000, rng)
    assert log.counts_total.tolist() == [0]
    assert log.live_dark_gates[0] == 0
    assert log.live_illuminated[0] == 50_000


def test_afterpulse_hazard_sums_to_total():
    det = DetectorConfig(afterpulse_total=0.04, deadtime_ns=100.0, trap_tau_ns=50.0)
    state = PixelState(spde_effective=det.spde)
    state.record_avalanche(0, det.deadtime_gates, det.trap_decay_per_gate)
    total = sum(afterpulse_gate_probability(state, det, gate=g) for g in range(101, 5101))
    assert total == pytest.approx(0.04, rel=1e-9)
    assert afterpulse_gate_probability(PixelState(spde_effective=0.1), det) == 0.0


def test_trap_charge_accumulates():
    state = PixelState(spde_effective=0.15)
    decay = math.exp(-1.0 / 50.0)
    state.record_avalanche(0, 100, decay)
    state.record_avalanche(150, 100, decay)
    assert state.trap_charge == pytest.approx(1.0 + decay**150)
    assert state.dead_until_gate == 250
    assert not state.is_live(250)
    assert state.is_live(251)


def test_blanking_policies_from_events():
    schedule = IlluminationSchedule(period_gates=1, mean_photons=0.0)
    log = GateEventLog.from_events(
        10, schedule, [3, 3], gates=[0, 0, 2, 4, 5], pixels=[0, 1, 1, 0, 1]
    )
    per_pixel = deadtime_blanking(log, "per-pixel")
    assert per_pixel.counts_total.tolist() == [2, 2]

    universal = deadtime_blanking(log, "universal")
    assert universal.counts_total.tolist() == [2, 1]
    assert universal.live_illuminated.tolist() == [4, 4]
    assert universal.coincidences[0, 1] == 1


def test_counting_mask_matches_blanking():
    gates = np.array([0, 0, 2, 4, 5])
    pixels = np.array([0, 1, 1, 0, 1])
    keep = counting_mask(gates, pixels, [3, 3], 2, "universal")
    assert keep.tolist() == [True, True, False, True, False]
    assert counting_mask(gates[:0], pixels[:0], [3, 3], 2, "per-pixel").shape == (0,)
    with pytest.raises(DomainError):
        counting_mask(gates, pixels, [3, 3], 2, "global")


def test_from_events_rejects_out_of_range_gate():
    schedule = IlluminationSchedule(period_gates=2, mean_photons=0.0)
    with pytest.raises(DomainError):
        GateEventLog.from_events(5, schedule, [0], gates=[5], pixels=[0])


def test_runs_are_deterministic():
    array = single_pixel(spde=0.5, dcr_hz=2e5, afterpulse_total=0.05, deadtime_ns=20.0)
    schedule = IlluminationSchedule(period_gates=4, mean_photons=0.3)
    a = run_gates(array, schedule, 100_000, RngSpec(seed=3))
    b = run_gates(array, schedule, 100_000, RngSpec(seed=3))
    c = run_gates(array, schedule, 100_000, RngSpec(seed=4))
    np.testing.assert_array_equal(a.event_gate, b.event_gate)
    np.testing.assert_array_equal(a.event_cause, b.event_cause)
    assert not np.array_equal(a.event_gate, c.event_gate)


@pytest.mark.parametrize("rate_tau", [0.1, 1.0, 10.0])
def test_deadtime_law(rate_tau, rng):
    # 100-gate dead time, r photons per gate with r * 100 = rate_tau
    r = rate_tau / 100.0
    p = -math.expm1(-r)
    gated = 1.0 / (100 + 1.0 / p)
    n = int(60_000 / gated)
    array = single_pixel(deadtime_ns=100.0)
    log = run_gates(array, IlluminationSchedule(period_gates=1, mean_photons=r), n, rng)
    observed = log.counts_total[0] / n
    assert abs(observed - gated) < 4 * math.sqrt(gated * n) / n
    assert observed == pytest.approx(r / (1.0 + rate_tau), rel=0.02)


def test_rate_never_exceeds_deadtime_cap(rng):
    array = single_pixel(deadtime_ns=100.0)
    log = run_gates(array, IlluminationSchedule(period_gates=1, mean_photons=50.0), 10_100, rng)
    assert log.counts_total[0] == 100
    assert np.all(np.diff(log.event_gate) == 101)


def test_cancel_event_stops_the_run(cancel_event, rng):
    cancel_event.set()
    engine = GateEngine(single_pixel(), rng, cancel_event=cancel_event)
    schedule = IlluminationSchedule(period_gates=1, mean_photons=50.0)
    with pytest.raises(CancelledError):
        engine.run(20_000, [ScheduleSource(schedule, single_pixel())])


def test_progress_and_update_callbacks(rng):
    progress, messages = [], []
    engine = GateEngine(
        single_pixel(),
        rng,
        update_callback=messages.append,
        progress_callback=lambda done, total, start: progress.append((done, total)),
    )
    schedule = IlluminationSchedule(period_gates=1, mean_photons=0.1)
    engine.run(1000, [ScheduleSource(schedule, single_pixel())])
    assert progress[-1] == (1000, 1000)
    assert messages and "1000 gates" in messages[0]


def test_engine_rejects_bad_gate_count(rng):
    with pytest.raises(DomainError):
        GateEngine(single_pixel(), rng).run(0, [])


def test_schedule_validation():
    with pytest.raises(DomainError):
        IlluminationSchedule(period_gates=0)
    with pytest.raises(DomainError):
        IlluminationSchedule(period_gates=4, phase_gate=4)
    schedule = IlluminationSchedule(period_gates=64, phase_gate=3)
    assert schedule.illuminated_count(3) == 0
    assert schedule.illuminated_count(4) == 1
    assert schedule.illuminated_count(64 * 10) == 10


def test_stimulus_must_arrive_after_emission():
    with pytest.raises(DomainError):
        CrosstalkStimulus(arrival_time_ns=1.0, source_pixel=0, strength=0.1, emission_time_ns=1.0)
    assert CrosstalkStimulus(2.5, 0, 0.1, 1.0).delay_ns == pytest.approx(1.5)


def _wide_gate_pair(strength=0.01):
    # 0.1 GHz gating with the gate filling the whole period
    det = DetectorConfig(
        spde=1.0,
        dcr_hz=0.0,
        afterpulse_total=0.0,
        deadtime_ns=100.0,
        gate_rate_ghz=0.1,
        gate_width_ps=10_000.0,
        trap_tau_ns=50.0,
    )
    return ArrayConfig(
        pixel_configs=(det, det),
        crosstalk_intrinsic=((0.0, strength), (strength, 0.0)),
        formation_tau_ns=2.5,
    )


def test_crosstalk_reaches_victim_at_intrinsic_rate(rng):
    schedule = IlluminationSchedule(period_gates=2, mean_photons=0.223, target_pixel=0)
    log = run_gates(_wide_gate_pair(), schedule, 400_000, rng)
    n_a = log.counts_total[0]
    tagged = log.tagged_crosstalk()[0, 1]
    assert n_a > 15_000
    assert abs(tagged / n_a - 0.01) < 4 * math.sqrt(0.01 / n_a)
    assert np.all(log.event_cause[log.event_pixel == 1] == CROSSTALK)


def test_wide_gates_recover_synchronous_crosstalk(rng):
    schedule = IlluminationSchedule(period_gates=2, mean_photons=0.223, target_pixel=0)
    log = run_gates(_wide_gate_pair(), schedule, 400_000, rng)
    matrices = measure_crosstalk(log)
    # 1 - exp(-2) of the intrinsic 1% lands in the aggressor's own gate
    assert 0.0055 < matrices.sync[0, 1] < 0.0115
    assert not matrices.low_confidence[0, 1]


def test_universal_policy_blanks_the_other_pixel(rng):
    array = _wide_gate_pair(strength=0.0)
    schedule = IlluminationSchedule(period_gates=1, mean_photons=0.05)
    per_pixel = run_gates(array, schedule, 200_000, rng, policy="per-pixel")
    universal = run_gates(array, schedule, 200_000, rng, policy="universal")
    assert universal.counts_total.sum() < per_pixel.counts_total.sum()
    gates = universal.event_gate
    for g in gates[:200]:
        others = gates[(gates > g) & (gates <= g + 10)]
        assert others.size == 0


def test_merge_offsets_and_sums(rng):
    schedule = IlluminationSchedule(period_gates=8, mean_photons=0.5)
    array = single_pixel(deadtime_ns=5.0)
    a = run_gates(array, schedule, 8000, rng.substream(0))
    b = run_gates(array, schedule, 8000, rng.substream(1))
    merged = merge_logs([a, b])
    assert merged.n_gates == 16_000
    assert merged.counts_total[0] == a.counts_total[0] + b.counts_total[0]
    assert np.all(np.diff(merged.event_gate) > 0)
    with pytest.raises(DomainError):
        merge_logs([])


def test_trials_do_not_depend_on_worker_count(rng):
    array = single_pixel(spde=0.3, dcr_hz=1e5, deadtime_ns=10.0)
    schedule = IlluminationSchedule(period_gates=16, mean_photons=0.5)
    serial = run_trials(array, schedule, 64_000, rng, n_trials=4, n_jobs=1)
    pooled = run_trials(array, schedule, 64_000, rng, n_trials=4, n_jobs=2)
    np.testing.assert_array_equal(serial.event_gate, pooled.event_gate)
    assert serial.n_gates == 64_000


def test_event_dump(tmp_path, rng):
    schedule = IlluminationSchedule(period_gates=1, mean_photons=0.01)
    log = run_gates(single_pixel(), schedule, 5000, rng)
    path = tmp_path / "events.csv"
    digest = dump_events_csv(log, str(path))
    rows = read_csv_rows(str(path))
    assert list(rows[0]) == EVENT_CSV_HEADER
    assert len(rows) == log.counts_total[0]
    assert {r["cause"] for r in rows} == {"photon"}
    assert len(digest) == 64


@pytest.mark.slow
def test_narrow_gates_suppress_synchronous_crosstalk():
    det = DetectorConfig(spde=1.0, dcr_hz=0.0, afterpulse_total=0.0, deadtime_ns=100.0)
    array = ArrayConfig(
        pixel_configs=(det, det), crosstalk_intrinsic=((0.0, 0.01), (0.01, 0.0))
    )
    schedule = IlluminationSchedule(period_gates=1, mean_photons=0.05, target_pixel=0)
    log = run_trials(array, schedule, 100_000_000, RngSpec(seed=99), n_trials=8)
    assert measure_crosstalk(log).sync[0, 1] < 0.001


def test_coincidences_are_accidentals_without_crosstalk(rng):
    schedule = IlluminationSchedule(period_gates=1, mean_photons=0.5)
    n = 200_000
    log = run_gates(pixel_pair(), schedule, n, rng)
    gates = [log.event_gate[log.event_pixel == p] for p in (0, 1)]
    singles = [g.size / n for g in gates]
    both = np.intersect1d(gates[0], gates[1]).size / n
    expected = singles[0] * singles[1]
    sigma = math.sqrt(expected * (1 - expected) / n)
    assert abs(both - expected) < 4 * sigma


def test_counts_grow_with_spde(rng):
    schedule = IlluminationSchedule(period_gates=1, mean_photons=0.2)
    counts = [
        run_gates(single_pixel(spde=spde), schedule, 100_000, rng).counts_illuminated[0]
        for spde in (0.05, 0.1, 0.15, 0.2)
    ]
    assert counts == sorted(counts)
    assert len(set(counts)) == len(counts)


def _gated_pair(gate_rate_ghz, gate_width_ps, strength=0.01):
    det = DetectorConfig(
        spde=1.0,
        dcr_hz=0.0,
        afterpulse_total=0.0,
        deadtime_ns=100.0,
        gate_rate_ghz=gate_rate_ghz,
        gate_width_ps=gate_width_ps,
    )
    return ArrayConfig(
        pixel_configs=(det, det),
        crosstalk_intrinsic=((0.0, strength), (strength, 0.0)),
        formation_tau_ns=2.5,
    )


def test_synchronous_crosstalk_follows_gate_width(rng):
    schedule = IlluminationSchedule(period_gates=2, mean_photons=0.223, target_pixel=0)
    measured = []
    for i, width_ps in enumerate((2_000.0, 5_000.0, 10_000.0)):
        log = run_gates(_gated_pair(0.1, width_ps), schedule, 1_000_000, rng.substream(i))
        sync = measure_crosstalk(log).sync[0, 1]
        expected = 0.01 * crosstalk_window_fractions(width_ps / 1000.0, 10.0, 2.5)[0]
        n_a = log.counts_total[0]
        assert abs(sync - expected) < 4 * math.sqrt(expected / n_a) + 2e-4
        measured.append(sync)
    assert measured == sorted(measured)


def test_long_gates_recover_most_crosstalk(rng):
    # 25 ns gates at 20 MHz: nearly every stimulus forms inside the gate
    schedule = IlluminationSchedule(period_gates=2, mean_photons=0.223, target_pixel=0)
    log = run_gates(_gated_pair(0.02, 25_000.0), schedule, 1_000_000, rng)
    assert measure_crosstalk(log).sync[0, 1] >= 0.006


def test_stimuli_resolve_by_identity():
    state = PixelState(spde_effective=0.15)
    early = CrosstalkStimulus(2.0, 0, 0.1, 1.0)
    late = CrosstalkStimulus(5.0, 0, 0.1, 1.0)
    state.push_stimulus(early, 0)
    state.push_stimulus(late, 1)
    assert state.resolve_stimulus(late) is late
    assert [entry[2] for entry in state.pending_stimuli] == [early]
    with pytest.raises(ModelError):
        state.resolve_stimulus(late)


def test_every_queued_stimulus_is_resolved(rng):
    array = _gated_pair(0.1, 10_000.0, strength=0.05)
    schedule = IlluminationSchedule(period_gates=2, mean_photons=0.5)
    engine = GateEngine(array, rng)
    _, pixels, causes, aggressors = engine.run(100_000, [ScheduleSource(schedule, array)])
    assert all(not state.pending_stimuli for state in engine.states)
    tagged = causes == CROSSTALK
    assert tagged.any()
    assert np.all(aggressors[tagged] == 1 - pixels[tagged])
