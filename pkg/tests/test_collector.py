import os
import sys
import threading
import time
from pathlib import Path

import numpy as np
import pytest

from wattscope import collector
from wattscope.collector import (
    CollectorConfig,
    CounterAccumulator,
    PowercapReading,
    PowercapSnapshot,
    query_gpu_power,
    read_powercap_snapshot,
    run_collector,
)
from wattscope.core import CounterDomain
from wattscope.errors import ParseError, PowercapPermissionError, UsageError
from wattscope.ingest import parse_gpu_sampler, parse_rapl_log

WRAP = 262_143_328_850


def make_zone(root: Path, rel: str, name: str, energy: str | None, wrap: str | None = str(WRAP)) -> Path:
    d = root / rel
    d.mkdir(parents=True, exist_ok=True)
    (d / "name").write_text(name + "\n")
    if energy is not None:
        (d / "energy_uj").write_text(energy + "\n")
    if wrap is not None:
        (d / "max_energy_range_uj").write_text(wrap + "\n")
    return d


def oracle_walk(root: Path) -> dict[str, tuple[str, int, int]]:
    out = {}
    for dirpath, _, files in os.walk(root):
        if {"name", "energy_uj", "max_energy_range_uj"} <= set(files):
            d = Path(dirpath)
            name = (d / "name").read_text().strip()
            if name.startswith("package") or name == "dram":
                out[str(d.relative_to(root))] = (
                    name, int((d / "energy_uj").read_text()), int((d / "max_energy_range_uj").read_text()))
    return out


# -- powercap -----------------------------------------------------------------------------

def test_single_zone_echo(tmp_path):
    make_zone(tmp_path, "intel-rapl:0", "package-0", "123456")
    snap = read_powercap_snapshot(tmp_path)
    assert snap.readings == [PowercapReading("intel-rapl:0", CounterDomain.CPU_PACKAGE, 123456, WRAP)]
    assert snap.warnings == []


def test_empty_root_warns(tmp_path):
    snap = read_powercap_snapshot(tmp_path)
    assert snap.readings == [] and snap.warnings


def test_missing_root_warns(tmp_path):
    assert read_powercap_snapshot(tmp_path / "nope").warnings


def test_two_domains_match_oracle_walk(tmp_path):
    make_zone(tmp_path, "intel-rapl:0", "package-0", "1000")
    make_zone(tmp_path, "intel-rapl:0/intel-rapl:0:0", "dram", "77", "65712999613")
    make_zone(tmp_path, "intel-rapl:0/intel-rapl:0:1", "core", "5")
    snap = read_powercap_snapshot(tmp_path)
    got = {r.zone: (r.domain, r.counter, r.wrap_range) for r in snap.readings}
    expect = oracle_walk(tmp_path)
    assert set(got) == set(expect)
    for zone, (name, counter, wrap) in expect.items():
        dom = CounterDomain.DRAM if name == "dram" else CounterDomain.CPU_PACKAGE
        assert got[zone] == (dom, counter, wrap)


def test_zone_with_missing_file_is_skipped(tmp_path):
    make_zone(tmp_path, "intel-rapl:0", "package-0", None)
    make_zone(tmp_path, "intel-rapl:1", "package-1", "42")
    snap = read_powercap_snapshot(tmp_path)
    assert [r.zone for r in snap.readings] == ["intel-rapl:1"]
    assert any("intel-rapl:0" in w for w in snap.warnings)


def test_permission_denied_is_actionable(tmp_path, monkeypatch):
    make_zone(tmp_path, "intel-rapl:0", "package-0", "1")
    real = Path.read_text

    def deny(self, *a, **kw):
        if self.name == "energy_uj":
            raise PermissionError(13, "Permission denied")
        return real(self, *a, **kw)

    monkeypatch.setattr(Path, "read_text", deny)
    with pytest.raises(PowercapPermissionError, match="elevated access or ownership of the power cap interface"):
        read_powercap_snapshot(tmp_path)


def test_accumulator_folds_zones_and_wraps():
    acc = CounterAccumulator()
    r = lambda zone, c: PowercapReading(zone, CounterDomain.CPU_PACKAGE, c, 100)
    assert acc.update([r("a", 90), r("b", 10)]) == {CounterDomain.CPU_PACKAGE: (0, 100)}
    # a wraps 90 -> 5 (+15), b advances 10 -> 30 (+20)
    assert acc.update([r("a", 5), r("b", 30)]) == {CounterDomain.CPU_PACKAGE: (35, 100)}
    assert acc.update([r("a", 75), r("b", 70)]) == {CounterDomain.CPU_PACKAGE: (45, 100)}


# -- gpu query ------------------------------------------------------------------------------

def test_query_gpu_power():
    assert query_gpu_power("305.00 W\n") == [305.0]
    assert query_gpu_power("75.00 W") == [75.0]
    assert query_gpu_power("1.0 W\n2.0 W\n3.0 W\n4.0 W\n") == [1.0, 2.0, 3.0, 4.0]


def test_query_gpu_power_bad_line():
    with pytest.raises(ParseError) as info:
        query_gpu_power("305.00 W\n[N/A]\n")
    assert info.value.raw == "[N/A]" and info.value.line == 2


# -- collector loop ---------------------------------------------------------------------------

class StubRapl:
    def __init__(self):
        self.counter = 0
        self.reads = 0

    def __call__(self):
        self.reads += 1
        self.counter = (self.counter + 15_000_000) % WRAP
        return PowercapSnapshot([PowercapReading("z", CounterDomain.CPU_PACKAGE, self.counter, WRAP),
                                 PowercapReading("d", CounterDomain.DRAM, self.counter // 10, WRAP)])


class StubGpu:
    def __init__(self, stall_at=None, stall_s=0.3, gpus=2):
        self.reads = 0
        self.stall_at = stall_at
        self.stall_s = stall_s
        self.gpus = gpus
        self.values: list[list[float]] = []

    def __call__(self):
        self.reads += 1
        if self.reads == self.stall_at:
            time.sleep(self.stall_s)
        v = [100.0 + self.reads + 0.5 * i for i in range(self.gpus)]
        self.values.append(v)
        return v


def _load(out: Path):
    gpus = [parse_gpu_sampler((out / f"gpu_{i}.csv").read_text()) for i in range(2)]
    rapl = parse_rapl_log((out / "rapl.csv").read_text())
    return gpus, rapl


def test_one_second_at_10hz(tmp_path):
    gpu, rapl = StubGpu(), StubRapl()
    res = run_collector(CollectorConfig(10.0, 1.0, output_dir=str(tmp_path)), gpu, rapl)
    gpus, traces = _load(tmp_path)
    for g in gpus:
        assert 9 <= len(g.trace) <= 11
        assert float(g.meta["achieved_rate_hz"]) == pytest.approx(len(g.trace) / 1.0)
    assert 9 <= len(traces[CounterDomain.CPU_PACKAGE]) <= 11
    assert res.gpu_samples <= 10 * 1.0 + 1
    assert not (tmp_path / "collect.partial").exists()
    assert not list(tmp_path.glob("*.partial"))


def test_stall_leaves_a_gap_and_no_fabricated_values(tmp_path):
    gpu = StubGpu(stall_at=4, stall_s=0.35)
    res = run_collector(CollectorConfig(10.0, 1.5, output_dir=str(tmp_path)), gpu, StubRapl())
    g0 = parse_gpu_sampler((tmp_path / "gpu_0.csv").read_text()).trace
    # every written value is one successful read, in order
    assert list(g0.powers) == [v[0] for v in gpu.values]
    assert res.gpu_samples == gpu.reads <= 10 * 1.5 + 1
    assert len(g0) < 15
    assert np.max(np.diff(g0.times)) > 0.3


def test_external_stop_finalizes_cleanly(tmp_path):
    stop = threading.Event()
    threading.Timer(0.35, stop.set).start()
    res = run_collector(CollectorConfig(10.0, None, output_dir=str(tmp_path)), StubGpu(), StubRapl(), stop)
    gpus, rapl = _load(tmp_path)
    assert 2 <= len(gpus[0].trace) <= 6
    assert res.elapsed == pytest.approx(0.35, abs=0.2)
    assert not (tmp_path / "collect.partial").exists()


def test_zero_duration_gives_header_only_files(tmp_path):
    def never():
        raise AssertionError("reader must not be called")

    run_collector(CollectorConfig(10.0, 0.0, output_dir=str(tmp_path)), never, never)
    g = parse_gpu_sampler((tmp_path / "gpu_0.csv").read_text())
    assert len(g.trace) == 0 and g.trace.nominal_interval == 0.1
    assert parse_rapl_log((tmp_path / "rapl.csv").read_text()) == {}


def test_failing_reads_are_missing_samples(tmp_path):
    calls = {"n": 0}

    def flaky():
        calls["n"] += 1
        if calls["n"] % 2:
            raise RuntimeError("device busy")
        return [50.0]

    res = run_collector(CollectorConfig(20.0, 0.5, output_dir=str(tmp_path)), flaky, StubRapl())
    g = parse_gpu_sampler((tmp_path / "gpu_0.csv").read_text()).trace
    assert len(g) == res.gpu_samples == calls["n"] // 2
    assert np.all(g.powers == 50.0)


def test_sink_failure_leaves_partial_marker(tmp_path, monkeypatch):
    def broken(path, lines):
        raise OSError("disk full")

    monkeypatch.setattr(collector, "_finalize", broken)
    with pytest.raises(OSError):
        run_collector(CollectorConfig(10.0, 0.2, output_dir=str(tmp_path)), StubGpu(), StubRapl())
    text = (tmp_path / "collect.partial").read_text()
    assert text.rstrip().endswith("# status=partial")
    assert not (tmp_path / "gpu_0.csv").exists()


def test_config_validation():
    with pytest.raises(ValueError):
        CollectorConfig(rate=0.0)
    with pytest.raises(ValueError):
        CollectorConfig(duration=-1.0)


# -- streaming backend ------------------------------------------------------------------------

STREAM_SCRIPT = (
    "import sys, time\n"
    "for i in range(200):\n"
    "    print(f'{100 + i}.00 W'); print(f'{200 + i}.00 W'); sys.stdout.flush(); time.sleep(0.02)\n"
)


def test_streaming_query_returns_fresh_blocks_only(tmp_path):
    script = tmp_path / "smi.py"
    script.write_text(STREAM_SCRIPT)
    q = collector.StreamingGpuQuery(f"{sys.executable} {script}", gpu_count=2).start()
    try:
        deadline = time.monotonic() + 5.0
        first = None
        while first is None and time.monotonic() < deadline:
            try:
                first = q()
            except RuntimeError:
                time.sleep(0.01)
        assert first is not None and first[1] - first[0] == 100.0
        with pytest.raises(RuntimeError):
            q()
        time.sleep(0.1)
        later = q()
        assert later[0] > first[0] and later[1] - later[0] == 100.0
    finally:
        q.close()
    assert q._proc.poll() is not None


def test_stream_backend_end_to_end(tmp_path):
    script = tmp_path / "smi.py"
    script.write_text(STREAM_SCRIPT)
    cfg = CollectorConfig(10.0, 0.8, gpu_query_command=f"{sys.executable} {script}", output_dir=str(tmp_path),
                          gpu_backend="stream", gpu_count=2)
    res = run_collector(cfg, rapl_reader=StubRapl())
    gpus, _ = _load(tmp_path)
    assert res.gpu_samples >= 3
    assert np.all(np.diff(gpus[0].trace.powers) > 0)
    assert np.allclose(gpus[1].trace.powers - gpus[0].trace.powers, 100.0)


def test_stream_backend_bad_command(tmp_path):
    cfg = CollectorConfig(10.0, 0.1, gpu_query_command="/nonexistent/smi", output_dir=str(tmp_path),
                          gpu_backend="stream")
    with pytest.raises(UsageError, match="cannot start GPU query command"):
        run_collector(cfg, rapl_reader=StubRapl())


def test_backend_validation():
    with pytest.raises(ValueError):
        CollectorConfig(gpu_backend="socket")
    with pytest.raises(ValueError):
        CollectorConfig(gpu_count=0)
