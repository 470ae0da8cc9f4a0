"""Live sampling of powercap energy counters and GPU power on one node.

Each source gets its own sampling thread driven by a monotonic clock. A
deadline that passes while a read is still running is dropped, never
back-filled: gaps in the output are real gaps in the measurement. Samples
go through a queue to a single writer thread.
"""

from __future__ import annotations

import logging
import os
import queue
import shlex
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from wattscope.core import CounterDomain
from wattscope.errors import ParseError, PowercapPermissionError, UsageError
from wattscope.ingest import GPU_HEADER, RAPL_HEADER, fmt

log = logging.getLogger(__name__)

POWERCAP_ROOT = "/sys/class/powercap"
DEFAULT_GPU_QUERY = "nvidia-smi --query-gpu=power.draw --format=csv,noheader"
GPU_BACKENDS = ("exec", "stream")

PERMISSION_HINT = "elevated access or ownership of the power cap interface may be required"


@dataclass(frozen=True)
class PowercapReading:
    zone: str
    domain: CounterDomain
    counter: int
    wrap_range: int


@dataclass
class PowercapSnapshot:
    readings: list[PowercapReading] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _domain_for(name: str) -> CounterDomain | None:
    name = name.strip().lower()
    if name.startswith("package"):
        return CounterDomain.CPU_PACKAGE
    if name == "dram":
        return CounterDomain.DRAM
    return None


def read_powercap_snapshot(root: str | Path = POWERCAP_ROOT) -> PowercapSnapshot:
    """Read ``energy_uj`` and ``max_energy_range_uj`` of every package/dram zone under ``root``."""
    root = Path(root)
    snap = PowercapSnapshot()
    if not root.is_dir():
        snap.warnings.append(f"{root}: not a directory")
        log.warning(snap.warnings[-1])
        return snap
    zones = sorted(p.parent for p in root.rglob("name"))
    for zone in zones:
        try:
            name = (zone / "name").read_text().strip()
        except PermissionError:
            raise PowercapPermissionError(f"{zone / 'name'}: permission denied; {PERMISSION_HINT}") from None
        except OSError as exc:
            snap.warnings.append(f"{zone}: cannot read name ({exc})")
            continue
        domain = _domain_for(name)
        if domain is None:
            continue
        try:
            counter = int((zone / "energy_uj").read_text().strip())
            wrap = int((zone / "max_energy_range_uj").read_text().strip())
        except PermissionError:
            raise PowercapPermissionError(f"{zone / 'energy_uj'}: permission denied; {PERMISSION_HINT}") from None
        except (OSError, ValueError) as exc:
            snap.warnings.append(f"{zone}: skipped ({exc})")
            log.warning(snap.warnings[-1])
            continue
        snap.readings.append(PowercapReading(str(zone.relative_to(root)), domain, counter, wrap))
    if not snap.readings:
        snap.warnings.append(f"{root}: no package or dram zones found")
        log.warning(snap.warnings[-1])
    return snap


def query_gpu_power(output: str) -> list[float]:
    """Watts per GPU from ``power.draw`` CSV output, one ``<float> W`` per line."""
    out = []
    for lineno, raw in enumerate(output.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        tok = line[:-1].strip() if line.endswith("W") else line
        try:
            out.append(float(tok))
        except ValueError:
            raise ParseError(f"unparsable GPU power line {raw!r}", lineno, raw=raw) from None
    return out


def run_gpu_query(command: str = DEFAULT_GPU_QUERY, timeout: float = 5.0) -> list[float]:
    proc = subprocess.run(shlex.split(command), capture_output=True, text=True, timeout=timeout, check=True)
    return query_gpu_power(proc.stdout)


class StreamingGpuQuery:
    """One long-running query process (e.g. ``nvidia-smi ... -lms 100``) instead of one per sample.

    The process prints ``gpu_count`` power lines per refresh. Each call returns
    the newest complete block; a call with no block newer than the previous
    one raises, so the sampler records a missing sample rather than a repeat.
    """

    def __init__(self, command: str, gpu_count: int = 1,
                 popen: Callable[..., subprocess.Popen] = subprocess.Popen) -> None:
        if gpu_count < 1:
            raise ValueError("gpu_count must be >= 1")
        self.command = command
        self.gpu_count = gpu_count
        self._popen = popen
        self._proc: subprocess.Popen | None = None
        self._thread: threading.Thread | None = None
        self._lock = threading.Lock()
        self._latest: list[float] | None = None
        self._seq = 0
        self._taken = 0

    def start(self) -> "StreamingGpuQuery":
        self._proc = self._popen(shlex.split(self.command), stdout=subprocess.PIPE, text=True, bufsize=1)
        self._thread = threading.Thread(target=self._pump, name="gpu-stream", daemon=True)
        self._thread.start()
        return self

    def _pump(self) -> None:
        block: list[str] = []
        for raw in self._proc.stdout:
            if not raw.strip():
                continue
            block.append(raw)
            if len(block) < self.gpu_count:
                continue
            try:
                values = query_gpu_power("".join(block))
            except ParseError as exc:
                log.warning("GPU stream: %s", exc)
                values = None
            block = []
            if values is not None:
                with self._lock:
                    self._latest = values
                    self._seq += 1

    def __call__(self) -> list[float]:
        with self._lock:
            if self._seq == self._taken:
                raise RuntimeError("no new GPU reading since the previous sample")
            self._taken = self._seq
            return list(self._latest)

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=2.0)
            except subprocess.TimeoutExpired:
                self._proc.kill()
        if self._thread is not None:
            self._thread.join(timeout=2.0)


class CounterAccumulator:
    """Folds several zones of one domain into a single wrapping counter."""

    def __init__(self) -> None:
        self.last: dict[str, int] = {}
        self.total: dict[CounterDomain, int] = {}
        self.wrap: dict[CounterDomain, int] = {}

    def update(self, readings: Iterable[PowercapReading]) -> dict[CounterDomain, tuple[int, int]]:
        for r in readings:
            wrap = self.wrap.setdefault(r.domain, r.wrap_range)
            self.wrap[r.domain] = max(wrap, r.wrap_range)
            prev = self.last.get(r.zone)
            step = 0
            if prev is not None:
                step = r.counter - prev
                if step < 0:
                    step += r.wrap_range
            self.last[r.zone] = r.counter
            self.total[r.domain] = self.total.get(r.domain, 0) + step
        return {d: (self.total[d] % self.wrap[d], self.wrap[d]) for d in self.total}


@dataclass
class CollectorConfig:
    rate: float = 10.0
    duration: float | None = 10.0
    powercap_root: str = POWERCAP_ROOT
    gpu_query_command: str = DEFAULT_GPU_QUERY
    output_dir: str = "."
    gpu_backend: str = "exec"
    gpu_count: int = 1

    def __post_init__(self) -> None:
        if self.gpu_backend not in GPU_BACKENDS:
            raise ValueError(f"gpu backend must be one of {', '.join(GPU_BACKENDS)}")
        if self.gpu_count < 1:
            raise ValueError("gpu_count must be >= 1")
        if not self.rate > 0:
            raise ValueError("collector rate must be > 0")
        if self.duration is not None and self.duration < 0:
            raise ValueError("duration must be >= 0 or None for unbounded")


@dataclass
class CollectorResult:
    gpu_files: list[Path]
    rapl_file: Path
    gpu_samples: int
    rapl_samples: int
    elapsed: float


def _periodic(read: Callable[[], object], rate: float, t_start: float, stop: threading.Event,
              deadline: float | None, emit: Callable[[float, object], None],
              clock: Callable[[], float]) -> None:
    period = 1.0 / rate
    k = 0
    while not stop.is_set():
        target = t_start + k * period
        if deadline is not None and target >= deadline:
            break
        now = clock()
        if target > now:
            if stop.wait(target - now):
                break
        t = clock() - t_start
        try:
            value = read()
        except Exception as exc:  # a failed read is a missing sample
            log.warning("sample read failed: %s", exc)
            value = None
        if value is not None:
            emit(t, value)
        done = clock()
        # drop every tick whose slot already passed during the read
        k = max(k + 1, int((done - t_start) / period) + 1)


def run_collector(
    config: CollectorConfig,
    gpu_reader: Callable[[], list[float]] | None = None,
    rapl_reader: Callable[[], PowercapSnapshot] | None = None,
    stop: threading.Event | None = None,
    clock: Callable[[], float] = time.monotonic,
) -> CollectorResult:
    """Sample until ``duration`` elapses or ``stop`` is set, then finalize the files.

    Output is ``gpu_<i>.csv`` per GPU and ``rapl.csv`` in the ingest formats.
    Data is streamed to ``*.partial`` files and renamed once complete; the
    header records the achieved rate. A failing sink leaves the partial file
    with a ``# status=partial`` marker.
    """
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stream = None
    if gpu_reader is None and config.gpu_backend == "stream":
        try:
            stream = gpu_reader = StreamingGpuQuery(config.gpu_query_command, config.gpu_count).start()
        except OSError as exc:
            raise UsageError(f"cannot start GPU query command {config.gpu_query_command!r}: {exc}") from None
    gpu_reader = gpu_reader or (lambda: run_gpu_query(config.gpu_query_command))
    rapl_reader = rapl_reader or (lambda: read_powercap_snapshot(config.powercap_root))
    stop = stop or threading.Event()
    q: queue.Queue = queue.Queue()
    t_start = clock()
    deadline = None if config.duration is None else t_start + config.duration

    threads = [
        threading.Thread(target=_periodic, name="gpu-sampler", daemon=True,
                         args=(gpu_reader, config.rate, t_start, stop, deadline,
                               lambda t, v: q.put(("gpu", t, v)), clock)),
        threading.Thread(target=_periodic, name="rapl-sampler", daemon=True,
                         args=(rapl_reader, config.rate, t_start, stop, deadline,
                               lambda t, v: q.put(("rapl", t, v)), clock)),
    ]

    gpu_rows: dict[int, list[str]] = {}
    rapl_rows: list[str] = []
    acc = CounterAccumulator()
    last_t = {"gpu": -1.0, "rapl": -1.0}
    partial = out / "collect.partial"
    counts = {"gpu": 0, "rapl": 0}

    def drain(block: bool) -> None:
        while True:
            try:
                kind, t, v = q.get(timeout=0.05) if block else q.get_nowait()
            except queue.Empty:
                return
            if t <= last_t[kind]:
                continue
            last_t[kind] = t
            counts[kind] += 1
            if kind == "gpu":
                for i, w in enumerate(v):
                    gpu_rows.setdefault(i, []).append(f"{fmt(t)},{fmt(w)}")
                line = f"gpu,{fmt(t)}," + ",".join(fmt(w) for w in v)
            else:
                for d, (c, wrap) in sorted(acc.update(v.readings).items(), key=lambda kv: kv[0].value):
                    rapl_rows.append(f"{fmt(t)},{d.value},{c},{wrap}")
                line = f"rapl,{fmt(t)}"
            with open(partial, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    partial.write_text("", encoding="utf-8")
    try:
        for th in threads:
            th.start()
        while any(th.is_alive() for th in threads):
            drain(block=True)
        for th in threads:
            th.join()
        drain(block=False)
        elapsed = clock() - t_start if config.duration is None else config.duration
        gpu_files, rapl_path = _write_outputs(out, config, gpu_rows, rapl_rows, counts, elapsed)
    except BaseException:
        stop.set()
        try:
            with open(partial, "a", encoding="utf-8") as fh:
                fh.write("# status=partial\n")
        except OSError:
            pass
        raise
    finally:
        if stream is not None:
            stream.close()
    partial.unlink(missing_ok=True)
    return CollectorResult(gpu_files, rapl_path, counts["gpu"], counts["rapl"], elapsed)


def _write_outputs(out: Path, config: CollectorConfig, gpu_rows: dict[int, list[str]], rapl_rows: list[str],
                   counts: dict[str, int], elapsed: float) -> tuple[list[Path], Path]:
    def rate(n: int) -> float:
        return n / elapsed if elapsed > 0 else 0.0

    gpu_files = []
    n_gpus = max(gpu_rows, default=-1) + 1
    for i in range(max(n_gpus, 1)):
        path = out / f"gpu_{i}.csv"
        header = [
            f"# interval_s={fmt(1.0 / config.rate)}",
            "# source=smi",
            f"# gpu_index={i}",
            f"# achieved_rate_hz={fmt(rate(counts['gpu']))}",
            ",".join(GPU_HEADER),
        ]
        _finalize(path, header + gpu_rows.get(i, []))
        gpu_files.append(path)
    rapl_path = out / "rapl.csv"
    _finalize(rapl_path, [f"# achieved_rate_hz={fmt(rate(counts['rapl']))}", ",".join(RAPL_HEADER)] + rapl_rows)
    return gpu_files, rapl_path


def _finalize(path: Path, lines: list[str]) -> None:
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
