"""Multi-session synthetic studies that exercise the whole pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from wattscope.analysis import (
    UndersamplePolicy,
    corrected_view,
    epoch_energy_table,
    full_training_totals,
    sample_energy_correlation,
)
from wattscope.calibrate import CalibrationProfile
from wattscope.core import CounterDomain, EnergyQuantity, counter_delta, integrate_power
from wattscope.report import (
    HolisticInputs,
    bounded_holistic_energy,
    codecarbon_energy,
    deviation,
)
from wattscope.stats import pearson
from wattscope.synth import RateCollapse, SamplerSpec, WorkloadSpec, generate_session

TRUTH = "truth"


@dataclass
class PathologyStudy:
    raw_epoch_pearson: float
    corrected_epoch_pearson: float
    raw_full_pearson: float
    corrected_full_pearson: float
    raw_count_energy: float
    corrected_count_energy: float
    pooled_raw_count_energy: float
    pooled_corrected_count_energy: float
    flagged_fraction: float
    n_epochs: int
    per_session_raw_count_energy: list[float] = field(default_factory=list)
    per_session_corrected_count_energy: list[float] = field(default_factory=list)


def pathology_study(
    n_sessions: int = 20,
    epochs: int = 200,
    low_power: float = 146.0,
    high_power: float = 305.0,
    low_fraction: float = 0.4,
    threshold_w: float = 200.0,
    collapsed_count: int = 10,
    duration_range: tuple[float, float] = (4.0, 30.0),
    low_duration_factor: float = 1.8,
    clock_jitter: float = 0.03,
    policy: UndersamplePolicy = UndersamplePolicy.absolute(10),
    seed: int = 0,
) -> PathologyStudy:
    """Flaky-sampler sessions judged against their analytic GPU energies.

    Each session draws its base epoch duration log-uniformly from
    ``duration_range``. Per-epoch correlations pool all epochs of all
    sessions; full-training correlations use one total per session.
    Sample-count/energy correlations are computed within each session and
    averaged, since sessions with longer epochs trivially have both more
    samples and more energy.
    """
    rng = np.random.default_rng(seed)
    sampler = SamplerSpec("smi", 10.0, RateCollapse(threshold_w, collapsed_count))
    raw_pairs: list[tuple[float, float]] = []
    cor_pairs: list[tuple[float, float]] = []
    raw_full: list[tuple[float, float]] = []
    cor_full: list[tuple[float, float]] = []
    raw_ce: list[float] = []
    cor_ce: list[float] = []
    pooled_raw: list[tuple[int, float]] = []
    pooled_cor: list[tuple[int, float]] = []
    flagged = 0
    total = 0
    lo, hi = duration_range
    for s in range(n_sessions):
        wl = WorkloadSpec(
            epoch_count=epochs,
            epoch_duration=float(math.exp(rng.uniform(math.log(lo), math.log(hi)))),
            low_power=low_power,
            high_power=high_power,
            low_fraction=low_fraction,
            low_duration_factor=low_duration_factor,
            clock_jitter=clock_jitter,
            seed=int(rng.integers(0, 2**31)),
            session_id=f"study-{s}",
        )
        sess = generate_session(wl, [sampler])
        truth = [EnergyQuantity(e["gpu_j"]) for e in sess.analytic["epochs"]]
        table = epoch_energy_table(sess.session, {"smi": sess.sampled["smi"]}, policy, derived={TRUTH: truth})
        kept = corrected_view(table, "smi", policy)
        flagged += len(table) - len(kept)
        total += len(table)
        for rows, pairs, full, ce, pooled in (
            (table, raw_pairs, raw_full, raw_ce, pooled_raw),
            (kept, cor_pairs, cor_full, cor_ce, pooled_cor),
        ):
            for r in rows:
                pairs.append((r.energy["smi"].joules, r.energy[TRUTH].joules))
                pooled.append((r.sample_count["smi"], r.energy["smi"].joules))
            totals = full_training_totals(rows)
            full.append((totals["smi"].joules, totals[TRUTH].joules))
            ce.append(sample_energy_correlation(rows, "smi"))

    def corr(pairs):
        a = np.asarray(pairs, dtype=float)
        return pearson(a[:, 0], a[:, 1])

    return PathologyStudy(
        raw_epoch_pearson=corr(raw_pairs),
        corrected_epoch_pearson=corr(cor_pairs),
        raw_full_pearson=corr(raw_full),
        corrected_full_pearson=corr(cor_full),
        raw_count_energy=float(np.mean(raw_ce)),
        corrected_count_energy=float(np.mean(cor_ce)),
        pooled_raw_count_energy=corr(pooled_raw),
        pooled_corrected_count_energy=corr(pooled_cor),
        flagged_fraction=flagged / total,
        n_epochs=total,
        per_session_raw_count_energy=raw_ce,
        per_session_corrected_count_energy=cor_ce,
    )


@dataclass
class ContainmentResult:
    n: int
    contained: int
    max_width_rel_error: float
    failures: list[dict] = field(default_factory=list)


def measured_components(sess) -> tuple[EnergyQuantity, EnergyQuantity, EnergyQuantity, float]:
    """Pipeline estimates of GPU, CPU and DRAM energy over the whole session."""
    t1 = sess.analytic["duration_s"]
    gpu = integrate_power(sess.sampled["nvml"], 0.0, t1)
    cpu = counter_delta(sess.rapl[CounterDomain.CPU_PACKAGE], 0.0, t1)
    dram = counter_delta(sess.rapl[CounterDomain.DRAM], 0.0, t1)
    return gpu, cpu, dram, t1


def containment_study(
    n_sessions: int = 1000,
    profile: CalibrationProfile = CalibrationProfile(783.0, 941.0),
    seed: int = 0,
) -> ContainmentResult:
    """Random small sessions whose true off-socket draw lies inside the profile."""
    rng = np.random.default_rng(seed)
    contained = 0
    worst = 0.0
    failures = []
    for i in range(n_sessions):
        off = float(rng.uniform(profile.p_idle_off_socket, profile.p_busy_off_socket))
        pue = float(rng.choice([1.0, 1.58, float(rng.uniform(1.0, 2.0))]))
        wl = WorkloadSpec(
            epoch_count=int(rng.integers(1, 8)),
            epoch_duration=float(rng.uniform(2.0, 20.0)),
            low_power=float(rng.uniform(60.0, 160.0)),
            high_power=float(rng.uniform(200.0, 400.0)),
            low_fraction=float(rng.uniform(0.0, 1.0)),
            cpu_power=float(rng.uniform(80.0, 400.0)),
            mem_power=float(rng.uniform(5.0, 40.0)),
            off_socket=off,
            clock_jitter=float(rng.uniform(0.0, 0.05)),
            seed=int(rng.integers(0, 2**31)),
        )
        sess = generate_session(wl, [SamplerSpec("nvml")])
        gpu, cpu, dram, t1 = measured_components(sess)
        est = bounded_holistic_energy(gpu, cpu, dram, t1, profile, pue)
        true_node = sess.analytic["total"]["node_j"] * pue
        if est.lower.joules <= true_node <= est.upper.joules:
            contained += 1
        else:
            failures.append({"index": i, "true_j": true_node, "lower_j": est.lower.joules,
                             "upper_j": est.upper.joules})
        expected_width = profile.width * t1 * pue
        width = est.upper.joules - est.lower.joules
        worst = max(worst, abs(width - expected_width) / expected_width if expected_width else abs(width))
    return ContainmentResult(n_sessions, contained, worst, failures)


@dataclass
class DeviationDemo:
    codecarbon_deviation: float
    lower_deviation: float
    point_deviation: float
    upper_deviation: float

    @property
    def bounds_worst(self) -> float:
        return max(abs(self.lower_deviation), abs(self.upper_deviation))


def deviation_demo(
    off_socket: float = 900.0,
    profile: CalibrationProfile = CalibrationProfile(783.0, 941.0, 811.0),
    seed: int = 7,
) -> DeviationDemo:
    """Code Carbon model vs calibrated bounds on a 2000 GB node drawing 12 W of DRAM."""
    wl = WorkloadSpec(epoch_count=50, epoch_duration=11.8, memory_gb=2000.0, mem_power=12.0,
                      off_socket=off_socket, clock_jitter=0.02, seed=seed)
    sess = generate_session(wl, [SamplerSpec("nvml")])
    gpu, cpu, dram, t1 = measured_components(sess)
    truth = EnergyQuantity(sess.analytic["total"]["node_j"])
    cc = codecarbon_energy(HolisticInputs(gpu, cpu, wl.memory_gb, t1, 1.0))
    est = bounded_holistic_energy(gpu, cpu, dram, t1, profile, 1.0)
    return DeviationDemo(deviation(cc, truth), deviation(est.lower, truth),
                         deviation(est.point, truth), deviation(est.upper, truth))
