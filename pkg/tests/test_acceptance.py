"""End-to-end acceptance checks. Each test prints one PASS/FAIL line and asserts."""

import itertools
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import counter_trace, grid_trace, record_criterion
from wattscope.calibrate import CalibrationProfile, CalibrationRun, build_profile
from wattscope.cli import main
from wattscope.core import CounterDomain, EnergyQuantity, PowerTrace, counter_delta, integrate_power
from wattscope.errors import CalibrationError
from wattscope.report import memory_power_estimate
from wattscope.stats import EcdfGap, ecdf_gaps, ks_exact_sf, ks_two_sample, pearson, spearman
from wattscope.study import containment_study, deviation_demo, pathology_study

ROOT = Path(__file__).resolve().parents[1]


def check(number, ok, detail, elapsed=None, budget=None):
    if budget is not None:
        detail += f" ({elapsed:.2f}s, budget {budget:g}s)"
        ok = ok and elapsed < budget
    record_criterion(number, ok, detail)
    assert ok, detail


def test_criterion_1_memory_model():
    a, b = memory_power_estimate(2000.0), memory_power_estimate(8.0)
    check(1, a == 750.0 and b == 3.0, f"memory(2000 GB)={a} W, memory(8 GB)={b} W")


def _run(off_socket, cpu_w, dram_w, gpu_w, seconds=30.0):
    n = int(round(seconds / 0.1))
    meter = grid_trace(np.full(n, off_socket + cpu_w + dram_w + sum(gpu_w)), source="meter")
    t = np.arange(0.0, seconds + 0.5, 1.0)
    cpu = counter_trace(t, cpu_w * t, start=987654)
    dram = counter_trace(t, dram_w * t, domain=CounterDomain.DRAM)
    gpus = tuple(grid_trace(np.full(n, g), source=f"gpu{i}") for i, g in enumerate(gpu_w))
    return CalibrationRun(meter, cpu, dram, gpus)


def test_criterion_2_calibration_arithmetic():
    t0 = time.perf_counter()
    idle = _run(783.0, 150.0, 12.0, (75.0,) * 4).off_socket()
    busy = _run(941.0, 400.0, 30.0, (305.0,) * 4).off_socket()
    prof = build_profile(783.0, 941.0, 811.0)
    try:
        build_profile(941.0, 783.0)
        rejected = False
    except CalibrationError:
        rejected = True
    ok = (abs(idle - 783.0) <= 1e-9 and abs(busy - 941.0) <= 1e-9
          and prof == CalibrationProfile(783.0, 941.0, 811.0) and rejected)
    check(2, ok, f"idle={idle:.12f} W busy={busy:.12f} W, inverted rejected={rejected}",
          time.perf_counter() - t0, 1.0)


@pytest.fixture(scope="module")
def study():
    t0 = time.perf_counter()
    res = pathology_study(n_sessions=20, epochs=200)
    return res, time.perf_counter() - t0


def test_criterion_3_pathology_reproduction(study):
    s, elapsed = study
    ok = (s.n_epochs >= 4000 and s.raw_epoch_pearson < 0.80 and s.corrected_epoch_pearson > 0.90
          and s.raw_full_pearson > 0.98 and s.corrected_full_pearson > 0.98)
    check(3, ok, f"per-epoch pearson raw={s.raw_epoch_pearson:.3f} corrected={s.corrected_epoch_pearson:.3f}, "
                 f"full-training raw={s.raw_full_pearson:.4f} corrected={s.corrected_full_pearson:.4f}, "
                 f"flagged={s.flagged_fraction:.2f}", elapsed, 30.0)


def test_criterion_4_count_energy_sign_flip(study):
    s, _ = study
    ok = s.raw_count_energy > 0.3 and s.corrected_count_energy < 0.0
    check(4, ok, f"corr(sample_count, energy) raw={s.raw_count_energy:.3f} "
                 f"corrected={s.corrected_count_energy:.3f}")


def test_criterion_5_ecdf_gap():
    rng = np.random.default_rng(5)
    samples = np.concatenate([rng.uniform(60.0, 130.0, 400), rng.uniform(150.0, 320.0, 600), [130.0, 150.0]])
    gaps = ecdf_gaps(samples, 10.0)
    check(5, gaps == [EcdfGap(130.0, 150.0)], f"gaps={gaps}")


def _ks_enumeration(n, m):
    counts = {}
    for xpos in itertools.combinations(range(n + m), n):
        xs = set(xpos)
        i = j = d = 0
        for k in range(n + m):
            if k in xs:
                i += 1
            else:
                j += 1
            d = max(d, abs(i * m - j * n))
        counts[d] = counts.get(d, 0) + 1
    return counts, math.comb(n + m, n)


def test_criterion_6_ks_correctness():
    t0 = time.perf_counter()
    worst = 0.0
    for n in range(1, 7):
        for m in range(1, 7):
            counts, total = _ks_enumeration(n, m)
            for d in range(n * m + 1):
                expect = sum(c for k, c in counts.items() if k >= d) / total
                worst = max(worst, abs(ks_exact_sf(n, m, d) - expect))
    rng = np.random.default_rng(6)
    never = all(not ks_two_sample(x, x, 0.05).reject
                for x in (rng.normal(size=k) for k in (1, 3, 6, 10, 50, 500)))
    check(6, worst <= 1e-12 and never, f"max |p - enumeration| = {worst:.1e} over n,m<=6, "
                                       f"identical samples never reject={never}",
          time.perf_counter() - t0, 10.0)


def test_criterion_7_containment():
    t0 = time.perf_counter()
    res = containment_study(1000)
    ok = res.contained == res.n and res.max_width_rel_error <= 1e-9
    check(7, ok, f"contained {res.contained}/{res.n}, max width rel error {res.max_width_rel_error:.1e}",
          time.perf_counter() - t0, 60.0)


def test_criterion_8_deviation_reduction():
    t0 = time.perf_counter()
    d = deviation_demo()
    ok = abs(d.codecarbon_deviation) > d.bounds_worst
    check(8, ok, f"code carbon model {d.codecarbon_deviation:+.2f}% vs bounds "
                 f"{d.lower_deviation:+.2f}%/{d.upper_deviation:+.2f}%", time.perf_counter() - t0, 5.0)


def test_criterion_9_core_numerics():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    tr = PowerTrace("g", 0.1, np.arange(500) * 0.1, rng.uniform(50.0, 300.0, 500))
    cuts = np.sort(rng.uniform(0.0, 49.9, 8))
    parts = sum(integrate_power(tr, a, b).joules for a, b in zip(cuts[:-1], cuts[1:]))
    additive = abs(parts - integrate_power(tr, cuts[0], cuts[-1]).joules) <= 1e-9 * parts
    wrapped = counter_trace([0.0, 1.0, 2.0], [0.0, 3000.0, 6000.0], wrap=2**32, start=2**32 - 1_000_000)
    wrap_ok = counter_delta(wrapped, 0.0, 2.0).joules == pytest.approx(6000.0, abs=1e-6)
    e = EnergyQuantity(123456.789)
    units = (EnergyQuantity.from_kwh(e.kwh).joules == pytest.approx(e.joules, rel=1e-15)
             and EnergyQuantity.from_wh(e.wh).joules == pytest.approx(e.joules, rel=1e-15)
             and EnergyQuantity.from_microjoules(e.microjoules).joules == pytest.approx(e.joules, rel=1e-15))
    x, y = rng.normal(size=200), rng.normal(size=200)
    xc, yc = x - x.mean(), y - y.mean()
    r_oracle = float(np.sum(xc * yc) / math.sqrt(np.sum(xc**2) * np.sum(yc**2)))
    rx, ry = np.argsort(np.argsort(x)) + 1.0, np.argsort(np.argsort(y)) + 1.0
    rho_oracle = 1 - 6 * np.sum((rx - ry) ** 2) / (200 * (200**2 - 1))
    corr_ok = abs(pearson(x, y) - r_oracle) <= 1e-12 and abs(spearman(x, y) - rho_oracle) <= 1e-12
    suite = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                            "tests/test_core.py", "tests/test_stats.py",
                            "-k", "test_core or pearson or spearman or ranks or correlation"],
                           cwd=ROOT, capture_output=True, text=True)
    summary = suite.stdout.strip().splitlines()[-1] if suite.stdout.strip() else suite.stderr[-200:]
    ok = additive and wrap_ok and units and corr_ok and suite.returncode == 0
    check(9, ok, f"additivity={additive} single-wrap={wrap_ok} units={units} correlation oracle={corr_ok}, "
                 f"property suite: {summary}", time.perf_counter() - t0, 10.0)


def _pipeline(root: Path, spec: Path) -> dict[str, bytes]:
    session, val, rep = root / "session", root / "validation", root / "report"
    assert main(["-q", "synth", str(spec), "--seed", "42", "--out", str(session)]) == 0
    assert main(["-q", "validate", str(session), "--paper-defaults", "--out", str(val)]) == 0
    assert main(["-q", "report", str(session), "--config", str(ROOT / "configs" / "paper.json"),
                 "--out", str(rep)]) == 0
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_pipeline_determinism(tmp_path):
    t0 = time.perf_counter()
    spec = ROOT / "configs" / "pathological_session.json"
    a = _pipeline(tmp_path / "first", spec)
    b = _pipeline(tmp_path / "second", spec)
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = not differing and len(a) > 10
    check(10, ok, f"{len(a)} artifacts byte-identical across two seeded runs, differing={differing}",
          time.perf_counter() - t0, 10.0)
