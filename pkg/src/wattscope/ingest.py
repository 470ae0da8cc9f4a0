"""Readers and writers for the toolkit's CSV trace dialects.

All formats are UTF-8, ``\\n``-terminated, with optional ``#`` comment lines
before the header. Numbers use a decimal point; locale-specific decimal
commas are rejected.

meter        ``timestamp,ch1_w,ch2_w,ch3_w,ch4_w``
gpu sampler  ``timestamp_s,power_w`` plus ``# interval_s=<s>``
rapl         ``timestamp_s,domain,counter_uj,wrap_range_uj``
codecarbon   ``timestamp_s,gpu_j,cpu_j,memory_j`` (cumulative)
session      ``key=value`` metadata lines, then ``epoch_idx,start_s,end_s``
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from wattscope.core import CounterDomain, EnergyCounterTrace, PowerTrace, SessionLog
from wattscope.errors import NoMarkerError, OrderingError, ParseError, ValidationError

log = logging.getLogger(__name__)

METER_HEADER = ("timestamp", "ch1_w", "ch2_w", "ch3_w", "ch4_w")
GPU_HEADER = ("timestamp_s", "power_w")
RAPL_HEADER = ("timestamp_s", "domain", "counter_uj", "wrap_range_uj")
CODECARBON_HEADER = ("timestamp_s", "gpu_j", "cpu_j", "memory_j")
SESSION_HEADER = ("epoch_idx", "start_s", "end_s")

METER_INTERVAL = 0.1
DEFAULT_GPU_INTERVAL = 0.1


def fmt(x: float) -> str:
    """Shortest text that parses back to the identical float."""
    return repr(float(x))


class RawMeterRecord(NamedTuple):
    timestamp: float
    channel_power: tuple[float, float, float, float]

    @property
    def total(self) -> float:
        return math.fsum(self.channel_power)


class ClockOffset(NamedTuple):
    offset: float
    confidence: float = 0.0


class CodeCarbonRow(NamedTuple):
    t: float
    gpu_energy: float
    cpu_energy: float
    memory_energy: float


@dataclass
class GpuSamplerFile:
    """A parsed GPU sampler file: the trace plus its comment metadata."""

    trace: PowerTrace
    interval_defaulted: bool = False
    meta: dict[str, str] = field(default_factory=dict)


def _float(tok: str, lineno: int, what: str) -> float:
    tok = tok.strip()
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"cannot parse {what} {tok!r} as a number", lineno, raw=tok) from None
    if not math.isfinite(v):
        raise ParseError(f"{what} must be finite, got {tok!r}", lineno, raw=tok)
    return v


def _lines(text: str) -> Iterator[tuple[int, str]]:
    for i, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        if line.strip():
            yield i, line


def _split_preamble(text: str, header: Sequence[str]) -> tuple[dict[str, str], list[str], list[tuple[int, str]]]:
    """Split into ``# key=value`` comments, bare ``key=value`` lines and data rows."""
    comments: dict[str, str] = {}
    plain: list[str] = []
    rows: list[tuple[int, str]] = []
    seen_header = False
    for lineno, line in _lines(text):
        s = line.strip()
        if not seen_header:
            if s.startswith("#"):
                body = s[1:].strip()
                if "=" in body:
                    k, v = body.split("=", 1)
                    comments[k.strip()] = v.strip()
                continue
            cols = tuple(c.strip() for c in s.split(","))
            if cols == tuple(header):
                seen_header = True
                continue
            if "=" in s and "," not in s:
                plain.append(s)
                continue
            raise ParseError(f"expected header {','.join(header)!r}, got {s!r}", lineno, raw=line)
        if s.startswith("#"):
            continue
        rows.append((lineno, line))
    if not seen_header:
        raise ParseError(f"missing header {','.join(header)!r}")
    return comments, plain, rows


def _fields(line: str, lineno: int, n: int) -> list[str]:
    parts = line.split(",")
    if len(parts) != n:
        raise ParseError(f"expected {n} fields, got {len(parts)}", lineno, raw=line)
    return parts


# -- meter -------------------------------------------------------------------

def parse_meter_csv(text: str) -> list[RawMeterRecord]:
    _, _, rows = _split_preamble(text, METER_HEADER)
    out: list[RawMeterRecord] = []
    prev = -math.inf
    for lineno, line in rows:
        parts = _fields(line, lineno, 5)
        ts = _float(parts[0], lineno, "timestamp")
        ch = tuple(_float(p, lineno, f"ch{i}_w") for i, p in enumerate(parts[1:], start=1))
        for i, v in enumerate(ch, start=1):
            if v < 0:
                raise ValidationError(f"negative power {v} on channel {i}", lineno, raw=line)
        if ts <= prev:
            raise OrderingError(f"timestamp {ts} does not increase (previous {prev})", lineno, raw=line)
        prev = ts
        out.append(RawMeterRecord(ts, ch))  # type: ignore[arg-type]
    return out


def write_meter_csv(records: Iterable[RawMeterRecord], comments: dict[str, str] | None = None) -> str:
    lines = [f"# {k}={v}" for k, v in (comments or {}).items()]
    lines.append(",".join(METER_HEADER))
    for r in records:
        lines.append(",".join([fmt(r.timestamp)] + [fmt(c) for c in r.channel_power]))
    return "\n".join(lines) + "\n"


def align(records: Sequence[RawMeterRecord], offset: ClockOffset | float = 0.0,
          source_id: str = "meter") -> PowerTrace:
    """Sum the four channels per record and move timestamps onto the session clock."""
    off = offset.offset if isinstance(offset, ClockOffset) else float(offset)
    t = np.fromiter((r.timestamp for r in records), dtype=float, count=len(records))
    p = np.fromiter((r.total for r in records), dtype=float, count=len(records))
    return PowerTrace(source_id, METER_INTERVAL, t + off, p)


def estimate_offset(meter: PowerTrace, marker_edges: Sequence[float], threshold_w: float = 50.0) -> ClockOffset:
    """Offset that moves the meter's largest power step onto the first marker.

    Equal step magnitudes resolve to the earliest step. The step time is the
    timestamp of the first sample after the jump.
    """
    if not marker_edges:
        raise NoMarkerError("no marker edges declared")
    if len(meter) < 2:
        raise NoMarkerError("meter trace too short to contain a step")
    jumps = np.abs(np.diff(meter.powers))
    k = int(np.argmax(jumps))  # argmax returns the first maximum
    if jumps[k] <= threshold_w:
        raise NoMarkerError(f"largest power step {jumps[k]:.3f} W does not exceed {threshold_w} W")
    step_t = float(meter.times[k + 1])
    return ClockOffset(float(marker_edges[0]) - step_t, meter.nominal_interval)


# -- gpu sampler ----------------------------------------------------------------

def parse_gpu_sampler(text: str, source_id: str = "gpu") -> GpuSamplerFile:
    comments, _, rows = _split_preamble(text, GPU_HEADER)
    defaulted = "interval_s" not in comments
    if defaulted:
        interval = DEFAULT_GPU_INTERVAL
        log.warning("GPU sampler file lacks '# interval_s=' comment; assuming %s s", interval)
    else:
        interval = _float(comments["interval_s"], 0, "interval_s")
        if interval <= 0:
            raise ValidationError(f"interval_s must be > 0, got {interval}")
    source = comments.get("source", source_id)
    ts: list[float] = []
    ps: list[float] = []
    prev = -math.inf
    for lineno, line in rows:
        parts = _fields(line, lineno, 2)
        t = _float(parts[0], lineno, "timestamp_s")
        p = _float(parts[1], lineno, "power_w")
        if p < 0:
            raise ValidationError(f"negative power {p}", lineno, raw=line)
        if t <= prev:
            raise OrderingError(f"timestamp {t} does not increase (previous {prev})", lineno, raw=line)
        prev = t
        ts.append(t)
        ps.append(p)
    trace = PowerTrace(source, interval, np.asarray(ts, dtype=float), np.asarray(ps, dtype=float))
    return GpuSamplerFile(trace, defaulted, comments)


def parse_gpu_sampler_csv(text: str, source_id: str = "gpu") -> PowerTrace:
    return parse_gpu_sampler(text, source_id).trace


def write_gpu_sampler_csv(trace: PowerTrace, extra: dict[str, str] | None = None) -> str:
    lines = [f"# interval_s={fmt(trace.nominal_interval)}", f"# source={trace.source_id}"]
    lines += [f"# {k}={v}" for k, v in (extra or {}).items()]
    lines.append(",".join(GPU_HEADER))
    lines += [f"{fmt(t)},{fmt(p)}" for t, p in zip(trace.times, trace.powers)]
    return "\n".join(lines) + "\n"


# -- rapl ---------------------------------------------------------------------

def parse_rapl_log(text: str) -> dict[CounterDomain, EnergyCounterTrace]:
    _, _, rows = _split_preamble(text, RAPL_HEADER)
    per: dict[CounterDomain, list[tuple[float, int, int]]] = {}
    for lineno, line in rows:
        parts = _fields(line, lineno, 4)
        t = _float(parts[0], lineno, "timestamp_s")
        name = parts[1].strip()
        try:
            dom = CounterDomain(name)
        except ValueError:
            raise ValidationError(f"unknown RAPL domain {name!r}", lineno, raw=line) from None
        try:
            counter = int(parts[2].strip())
            wrap = int(parts[3].strip())
        except ValueError:
            raise ParseError("counter_uj and wrap_range_uj must be integers", lineno, raw=line) from None
        if wrap <= 0:
            raise ValidationError(f"wrap_range_uj must be > 0, got {wrap}", lineno, raw=line)
        if not 0 <= counter < wrap:
            raise ValidationError(f"counter {counter} outside [0, {wrap})", lineno, raw=line)
        rows_d = per.setdefault(dom, [])
        if rows_d:
            if t <= rows_d[-1][0]:
                raise OrderingError(f"{dom.value} timestamp {t} does not increase", lineno, raw=line)
            if wrap != rows_d[-1][2]:
                raise ValidationError(f"{dom.value} wrap range changed mid-log", lineno, raw=line)
        rows_d.append((t, counter, wrap))
    return {
        dom: EnergyCounterTrace.from_readings(dom, rs[0][2], [(t, c) for t, c, _ in rs])
        for dom, rs in per.items()
    }


def write_rapl_log(traces: Iterable[EnergyCounterTrace]) -> str:
    rows: list[tuple[float, int, str]] = []
    for order, tr in enumerate(traces):
        for t, c in tr.readings:
            rows.append((t, order, f"{fmt(t)},{tr.domain.value},{c},{tr.wrap_range}"))
    rows.sort(key=lambda r: (r[0], r[1]))
    return "\n".join([",".join(RAPL_HEADER)] + [r[2] for r in rows]) + "\n"


# -- codecarbon -----------------------------------------------------------------

def parse_codecarbon_log(text: str) -> list[CodeCarbonRow]:
    _, _, rows = _split_preamble(text, CODECARBON_HEADER)
    out: list[CodeCarbonRow] = []
    for lineno, line in rows:
        parts = _fields(line, lineno, 4)
        vals = [_float(p, lineno, name) for p, name in zip(parts, CODECARBON_HEADER)]
        row = CodeCarbonRow(*vals)
        if out:
            if row.t <= out[-1].t:
                raise OrderingError(f"timestamp {row.t} does not increase", lineno, raw=line)
            for name, a, b in zip(CODECARBON_HEADER[1:], out[-1][1:], row[1:]):
                if b < a:
                    raise ValidationError(f"cumulative column {name} decreases ({a} -> {b})", lineno, raw=line)
        for name, v in zip(CODECARBON_HEADER[1:], row[1:]):
            if v < 0:
                raise ValidationError(f"negative {name}", lineno, raw=line)
        out.append(row)
    return out


def codecarbon_deltas(rows: Sequence[CodeCarbonRow]) -> list[CodeCarbonRow]:
    """Per-interval energies; each row is stamped with the interval's end time."""
    return [
        CodeCarbonRow(b.t, b.gpu_energy - a.gpu_energy, b.cpu_energy - a.cpu_energy, b.memory_energy - a.memory_energy)
        for a, b in zip(rows, rows[1:])
    ]


def codecarbon_window(rows: Sequence[CodeCarbonRow], t0: float, t1: float) -> CodeCarbonRow:
    """Component energies between the rows nearest to ``t0`` and ``t1``."""
    if len(rows) < 2:
        raise ValidationError("code carbon log needs at least two rows for a window")
    ts = np.array([r.t for r in rows])
    i0 = int(np.clip(np.searchsorted(ts, t0 + 1e-9, side="right") - 1, 0, len(rows) - 1))
    i1 = int(np.clip(np.searchsorted(ts, t1 - 1e-9, side="left"), 0, len(rows) - 1))
    a, b = rows[i0], rows[i1]
    return CodeCarbonRow(b.t - a.t, b.gpu_energy - a.gpu_energy, b.cpu_energy - a.cpu_energy,
                         b.memory_energy - a.memory_energy)


def write_codecarbon_log(rows: Iterable[CodeCarbonRow]) -> str:
    lines = [",".join(CODECARBON_HEADER)]
    lines += [",".join(fmt(v) for v in r) for r in rows]
    return "\n".join(lines) + "\n"


# -- session ------------------------------------------------------------------

_SESSION_KEYS = {"session_id", "memory_gb", "gpu_count", "gpu_nominal_rate_hz"}


def parse_session_log(text: str) -> SessionLog:
    comments, plain, rows = _split_preamble(text, SESSION_HEADER)
    meta: dict[str, str] = {}
    for s in plain:
        k, v = s.split("=", 1)
        meta[k.strip()] = v.strip()
    for k in _SESSION_KEYS & comments.keys():
        meta.setdefault(k, comments[k])
    missing = {"memory_gb"} - meta.keys()
    if missing:
        raise ValidationError(f"session metadata lacks {sorted(missing)}")
    memory_gb = _float(meta["memory_gb"], 0, "memory_gb")
    try:
        gpu_count = int(meta.get("gpu_count", "1"))
    except ValueError:
        raise ValidationError(f"gpu_count must be an integer, got {meta['gpu_count']!r}") from None
    rate = _float(meta.get("gpu_nominal_rate_hz", "10"), 0, "gpu_nominal_rate_hz")
    epochs: list[tuple[float, float]] = []
    prev_idx = -1
    prev_end = -math.inf
    for lineno, line in rows:
        parts = _fields(line, lineno, 3)
        try:
            idx = int(parts[0].strip())
        except ValueError:
            raise ParseError(f"epoch_idx {parts[0]!r} is not an integer", lineno, raw=line) from None
        start = _float(parts[1], lineno, "start_s")
        end = _float(parts[2], lineno, "end_s")
        if idx != prev_idx + 1:
            raise OrderingError(f"epoch index {idx} out of order (expected {prev_idx + 1})", lineno, raw=line)
        if not start < end:
            raise ValidationError(f"epoch {idx} is empty or reversed", lineno, raw=line)
        if start < prev_end:
            raise ValidationError(f"epoch {idx} overlaps the previous epoch", lineno, raw=line)
        prev_idx, prev_end = idx, end
        epochs.append((start, end))
    try:
        return SessionLog(meta.get("session_id", "session"), tuple(epochs), memory_gb, gpu_count, rate)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def write_session_log(session: SessionLog) -> str:
    lines = [
        f"session_id={session.session_id}",
        f"memory_gb={fmt(session.memory_gb)}",
        f"gpu_count={session.gpu_count}",
        f"gpu_nominal_rate_hz={fmt(session.gpu_nominal_rate)}",
        ",".join(SESSION_HEADER),
    ]
    lines += [f"{i},{fmt(s)},{fmt(e)}" for i, (s, e) in enumerate(session.epochs)]
    return "\n".join(lines) + "\n"
