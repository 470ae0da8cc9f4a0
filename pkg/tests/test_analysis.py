import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import counter_trace, grid_trace
from wattscope.analysis import (
    UndersamplePolicy,
    compare_sources,
    corrected_view,
    epoch_energy_table,
    expected_samples,
    flagged_fraction,
    full_training_totals,
    paired,
    reference_gpu_energy,
    sample_energy_correlation,
    segment_epochs,
    undersampled,
    usage_power_summary,
)
from wattscope.calibrate import CalibrationProfile
from wattscope.core import CounterDomain, EnergyQuantity, PowerTrace, SessionLog
from wattscope.errors import CalibrationError, UsageError


def session(bounds, memory_gb=64.0):
    return SessionLog("t", tuple(zip(bounds[:-1], bounds[1:])), memory_gb)


# -- policy -----------------------------------------------------------------------------

def test_absolute_policy_flags_at_or_below_k():
    p = UndersamplePolicy.absolute(10)
    assert p.flags(10, 100) and p.flags(0, 100)
    assert not p.flags(11, 100)


def test_ratio_policy_flags_below_fraction():
    p = UndersamplePolicy.ratio(0.5)
    assert p.flags(49, 100)
    assert not p.flags(50, 100)


def test_policy_parse_and_str():
    assert UndersamplePolicy.parse("absolute:7") == UndersamplePolicy.absolute(7)
    assert UndersamplePolicy.parse("ratio:0.25") == UndersamplePolicy.ratio(0.25)
    assert UndersamplePolicy.parse("ratio") == UndersamplePolicy.ratio(0.5)
    assert str(UndersamplePolicy.absolute(10)) == "absolute:10"
    for bad in ("absolute:x", "median:3", ""):
        with pytest.raises(UsageError):
            UndersamplePolicy.parse(bad)
    with pytest.raises(ValueError):
        UndersamplePolicy("absolute", -1)


def test_expected_samples():
    assert expected_samples(11.8, 10.0) == 118
    assert expected_samples(0.3, 10.0) == 3
    assert expected_samples(0.01, 10.0) == 1


# -- epoch table ----------------------------------------------------------------------------

def test_segment_epochs_half_open():
    tr = grid_trace(np.ones(30), interval=0.1)
    parts, outside = segment_epochs(tr, session([0.0, 1.0, 2.0]))
    assert [len(p) for p in parts] == [10, 10]
    assert outside == 10


def test_epoch_table_energy_counts_and_flags():
    # epoch 0: 100 W at 10 Hz; epoch 1: only 3 samples at 50 W, each held 0.1 s
    t = np.concatenate([np.arange(100) * 0.1, [10.0, 13.0, 16.0]])
    p = np.concatenate([np.full(100, 100.0), [50.0] * 3])
    tr = PowerTrace("smi", 0.1, t, p)
    sess = session([0.0, 10.0, 20.0])
    cpu = counter_trace([0.0, 10.0, 20.0], [0.0, 1500.0, 3000.0])
    table = epoch_energy_table(sess, {"smi": tr, "cpu": cpu}, UndersamplePolicy.absolute(10))
    assert table[0].energy["smi"].joules == pytest.approx(1000.0)
    assert table[1].energy["smi"].joules == pytest.approx(15.0)
    assert table[0].sample_count["smi"] == 100 and table[1].sample_count["smi"] == 3
    assert table[0].expected_samples["smi"] == 100
    assert table[1].undersampled["smi"] and not table[0].undersampled["smi"]
    assert table[1].energy["cpu"].joules == pytest.approx(1500.0)
    assert undersampled(table[1], "smi")
    assert [r.epoch_idx for r in corrected_view(table, "smi")] == [0]
    assert flagged_fraction(table, "smi") == 0.5


def test_missing_cells_are_none_not_zero():
    tr = grid_trace(np.full(10, 100.0))
    table = epoch_energy_table(session([0.0, 1.0, 2.0]), {"smi": tr})
    assert table[1].energy["smi"] is None
    assert table[1].sample_count["smi"] == 0
    assert full_training_totals(table)["smi"] is None


def test_multi_gpu_source_sums_energy_and_takes_min_count():
    a = grid_trace(np.full(10, 100.0))
    b = PowerTrace("b", 0.1, np.arange(5) * 0.2, np.full(5, 50.0))
    table = epoch_energy_table(session([0.0, 1.0]), {"smi": [a, b]})
    assert table[0].energy["smi"].joules == pytest.approx(100.0 + 25.0)
    assert table[0].sample_count["smi"] == 5


def test_derived_cells_and_length_check():
    sess = session([0.0, 1.0, 2.0])
    table = epoch_energy_table(sess, {}, derived={"truth": [EnergyQuantity(1.0), None]})
    assert table[0].energy["truth"].joules == 1.0 and table[1].energy["truth"] is None
    with pytest.raises(ValueError):
        epoch_energy_table(sess, {}, derived={"truth": [EnergyQuantity(1.0)]})


def _meter_fixture(gpu_w, off=800.0, cpu_w=150.0, dram_w=12.0, seconds=20.0):
    n = int(seconds / 0.1)
    gpu = np.asarray(gpu_w, dtype=float)
    meter = grid_trace(gpu + off + cpu_w + dram_w, source="meter")
    t = np.array([0.0, 10.0, 20.0])
    return (meter, counter_trace(t, cpu_w * t), counter_trace(t, dram_w * t, domain=CounterDomain.DRAM))


def test_reference_gpu_energy():
    gpu = np.concatenate([np.full(100, 300.0), np.full(100, 146.0)])
    meter, cpu, dram = _meter_fixture(gpu)
    prof = CalibrationProfile(783.0, 941.0, 800.0)
    sess = session([0.0, 10.0, 20.0])
    exact = reference_gpu_energy(sess, meter, cpu, dram, prof, off_socket=800.0)
    assert [e.joules for e in exact] == pytest.approx([3000.0, 1460.0])
    busy = reference_gpu_energy(sess, meter, cpu, dram, prof)
    assert busy[0].joules == pytest.approx((300.0 - 141.0) * 10.0)


def test_reference_strict_and_lenient():
    gpu = np.concatenate([np.full(100, 300.0), np.full(100, 0.0)])
    meter, cpu, dram = _meter_fixture(gpu)
    prof = CalibrationProfile(783.0, 941.0)
    sess = session([0.0, 10.0, 20.0])
    with pytest.raises(CalibrationError):
        reference_gpu_energy(sess, meter, cpu, dram, prof)
    cells = reference_gpu_energy(sess, meter, cpu, dram, prof, strict=False)
    assert cells[0] is not None and cells[1] is None
    outside = reference_gpu_energy(session([30.0, 40.0]), meter, cpu, dram, prof)
    assert outside == [None]


def test_compare_sources_energy_and_mean_power():
    sess = session([0.0, 1.0, 3.0, 4.0, 7.0])
    ref = [EnergyQuantity(v) for v in (100.0, 400.0, 150.0, 900.0)]
    est = [EnergyQuantity(v) for v in (90.0, 410.0, 160.0, 880.0)]
    table = epoch_energy_table(sess, {}, derived={"est": est, "ref": ref})
    xs, ys = paired(table, "est", "ref", "mean_power")
    assert list(ys) == [100.0, 200.0, 150.0, 300.0]
    rep = compare_sources(table, "est", "ref")
    assert rep.pearson > 0.99 and rep.n == 4
    with pytest.raises(ValueError):
        paired(table, "est", "ref", "median")


def test_sample_energy_correlation_sign():
    # fewer samples in the low-power epochs: positive correlation
    sess = session([0.0, 10.0, 20.0, 30.0, 40.0])
    t, p = [], []
    for k, (w, n) in enumerate([(300.0, 100), (146.0, 5), (300.0, 100), (146.0, 5)]):
        t += list(k * 10.0 + np.arange(n) * (10.0 / n))
        p += [w] * n
    tr = PowerTrace("smi", 0.1, np.array(t), np.array(p))
    table = epoch_energy_table(sess, {"smi": tr})
    assert sample_energy_correlation(table, "smi") > 0.9


@given(st.lists(st.integers(0, 120), min_size=1, max_size=40), st.integers(0, 20))
def test_corrected_view_is_the_unflagged_subset(counts, k):
    sess = session(list(np.arange(len(counts) + 1) * 12.0))
    t = []
    for i, n in enumerate(counts):
        t += list(i * 12.0 + np.arange(n) * 0.1)
    tr = PowerTrace("s", 0.1, np.array(t), np.full(len(t), 100.0))
    pol = UndersamplePolicy.absolute(k)
    table = epoch_energy_table(sess, {"s": tr}, pol)
    kept = corrected_view(table, "s", pol)
    assert [r.epoch_idx for r in kept] == [i for i, n in enumerate(counts) if n > k]
    assert flagged_fraction(table, "s", pol) == pytest.approx(sum(n <= k for n in counts) / len(counts))


def test_usage_power_summary():
    s = usage_power_summary([[100, 110], [200, 210], [300, 290]], [[10, 10], [50, 50], [90, 90]],
                            [[5, 5], [4, 4], [6, 6]])
    assert s.rows[0].mean_power == 105.0
    assert s.power_vs_util == pytest.approx(1.0, abs=1e-3)
    with pytest.raises(ValueError):
        usage_power_summary([[1]], [], [])


# -- reference examples ---------------------------------------------------------------

def test_segment_counts_and_boundary_convention():
    parts, outside = segment_epochs(grid_trace(np.ones(30)), session([0.0, 1.0, 2.0, 3.0]))
    assert [len(p) for p in parts] == [10, 10, 10] and outside == 0
    tr = PowerTrace("s", 0.1, np.array([0.5, 1.0, 1.5]), np.ones(3))
    parts, _ = segment_epochs(tr, session([0.0, 1.0, 2.0]))
    assert list(parts[1].times) == [1.0, 1.5]


@given(st.lists(st.floats(0.0, 50.0), min_size=0, max_size=80), st.lists(st.floats(0.5, 10.0), min_size=1,
                                                                          max_size=6))
def test_segment_counts_match_filter_oracle(ts, widths):
    times = np.unique(np.round(ts, 3))
    tr = PowerTrace("s", 0.1, times, np.ones(times.size))
    bounds = list(np.concatenate(([0.0], np.cumsum(widths))))
    sess = session(bounds)
    parts, outside = segment_epochs(tr, sess)
    oracle = [sum(1 for t in times if a <= t < b) for a, b in sess.epochs]
    assert [len(p) for p in parts] == oracle
    assert outside == times.size - sum(oracle)


def test_epoch_energy_reference_values():
    table = epoch_energy_table(session([0.0, 10.0]), {"smi": grid_trace(np.full(100, 146.0))})
    assert table[0].energy["smi"].joules == pytest.approx(1460.0)
    rng = np.random.default_rng(8)
    tr = grid_trace(rng.uniform(100.0, 300.0, 400))
    table = epoch_energy_table(session([0.0, 7.3, 19.1, 33.0, 40.0]), {"smi": tr})
    total = full_training_totals(table)["smi"].joules
    assert total == pytest.approx(sum(r.energy["smi"].joules for r in table), rel=1e-12)


def test_policy_reference_values():
    for pol in (UndersamplePolicy.absolute(10), UndersamplePolicy.ratio(0.5)):
        assert pol.flags(10, 118)
        assert not pol.flags(118, 118)


def test_corrected_view_reference_fractions():
    counts = [5] * 39 + [120] * 61
    sess = session(list(np.arange(101) * 12.0))
    t = []
    for i, n in enumerate(counts):
        t += list(i * 12.0 + np.arange(n) * 0.1)
    table = epoch_energy_table(sess, {"s": PowerTrace("s", 0.1, np.array(t), np.full(len(t), 200.0))})
    assert flagged_fraction(table, "s") == pytest.approx(0.39)
    assert len(corrected_view(table, "s")) == 61
    full = epoch_energy_table(session([0.0, 10.0, 20.0]), {"s": grid_trace(np.full(200, 1.0))})
    assert corrected_view(full, "s") == full


@pytest.mark.parametrize("low_fraction", [0.1, 0.25, 0.39, 0.6])
def test_flagged_fraction_matches_configured_pathology(low_fraction):
    from wattscope.synth import RateCollapse, SamplerSpec, WorkloadSpec, generate_session

    for seed in range(3):
        wl = WorkloadSpec(epoch_count=200, low_fraction=low_fraction, clock_jitter=0.03, seed=seed)
        s = generate_session(wl, [SamplerSpec("smi", 10.0, RateCollapse(200.0, 10))])
        table = epoch_energy_table(s.session, {"smi": s.sampled["smi"]})
        assert abs(flagged_fraction(table, "smi") - low_fraction) <= 0.02


def test_correction_raises_pearson_on_synthetic_session():
    from wattscope.stats import pearson
    from wattscope.synth import RateCollapse, SamplerSpec, WorkloadSpec, generate_session

    wl = WorkloadSpec(epoch_count=200, epoch_duration=11.8, low_duration_factor=1.8, clock_jitter=0.03, seed=3)
    s = generate_session(wl, [SamplerSpec("smi", 10.0, RateCollapse(200.0, 10))])
    truth = [EnergyQuantity(e["gpu_j"]) for e in s.analytic["epochs"]]
    table = epoch_energy_table(s.session, {"smi": s.sampled["smi"]}, derived={"truth": truth})
    raw = pearson(*paired(table, "smi", "truth"))
    fixed = pearson(*paired(corrected_view(table, "smi"), "smi", "truth"))
    assert fixed > raw


def test_usage_reference_cases():
    rng = np.random.default_rng(1000)
    power = rng.uniform(100.0, 300.0, (1000, 5))
    scaled = usage_power_summary(power, power / 3.0, rng.uniform(0, 100, (1000, 5)))
    assert scaled.power_vs_util == pytest.approx(1.0, abs=1e-12)
    noise = usage_power_summary(power, rng.uniform(0, 100, (1000, 5)), rng.uniform(0, 100, (1000, 5)))
    assert abs(noise.power_vs_util) < 0.1


def test_usage_memory_bound_split():
    # several GPUs pinned near full utilisation; power follows memory traffic only
    rng = np.random.default_rng(4)
    mem = rng.uniform(20.0, 90.0, (300, 1)) + rng.normal(0.0, 2.0, (300, 20))
    util = np.clip(rng.normal(98.0, 1.0, (300, 20)), 0, 100)
    power = 120.0 + 2.5 * mem + rng.normal(0.0, 5.0, (300, 20))
    s = usage_power_summary(power, util, mem)
    assert abs(s.power_vs_util) < 0.15
    assert s.power_vs_mem_util > 0.95
