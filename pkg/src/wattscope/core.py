"""Domain types, energy integration and cumulative-counter arithmetic.

Joules are the canonical unit everywhere inside the package. Conversions to
Wh/kWh happen only at report boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from wattscope.errors import (
    InsufficientDataError,
    InvalidWindowError,
    NoSamplesInWindowError,
    UnreliableCounterError,
    ValidationError,
)

J_PER_WH = 3600.0
J_PER_KWH = 3.6e6
UJ_PER_J = 1e6

# Snapping slack for timestamps that went through a text round trip.
TIME_EPS = 1e-9


class PowerSample(NamedTuple):
    t: float
    power: float


@dataclass(frozen=True, order=True)
class EnergyQuantity:
    joules: float = 0.0

    def __post_init__(self) -> None:
        if not (self.joules >= 0.0) or math.isinf(self.joules):
            raise ValueError(f"energy must be a finite non-negative number of joules, got {self.joules!r}")

    @classmethod
    def from_wh(cls, wh: float) -> "EnergyQuantity":
        return cls(wh * J_PER_WH)

    @classmethod
    def from_kwh(cls, kwh: float) -> "EnergyQuantity":
        return cls(kwh * J_PER_KWH)

    @classmethod
    def from_microjoules(cls, uj: float) -> "EnergyQuantity":
        return cls(uj / UJ_PER_J)

    @property
    def wh(self) -> float:
        return self.joules / J_PER_WH

    @property
    def kwh(self) -> float:
        return self.joules / J_PER_KWH

    @property
    def microjoules(self) -> float:
        return self.joules * UJ_PER_J

    def __add__(self, other: "EnergyQuantity") -> "EnergyQuantity":
        return EnergyQuantity(self.joules + other.joules)

    def __mul__(self, k: float) -> "EnergyQuantity":
        return EnergyQuantity(self.joules * k)

    __rmul__ = __mul__


def _frozen(a: Iterable[float], dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PowerTrace:
    """Timestamped power samples from a single source.

    ``times`` are seconds on the session clock, ``powers`` watts. Each
    sample is taken to hold for ``nominal_interval`` seconds.
    """

    source_id: str
    nominal_interval: float
    times: np.ndarray
    powers: np.ndarray

    def __post_init__(self) -> None:
        t = _frozen(self.times)
        p = _frozen(self.powers)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "powers", p)
        if not self.nominal_interval > 0:
            raise ValueError(f"nominal_interval must be > 0, got {self.nominal_interval!r}")
        if t.ndim != 1 or t.shape != p.shape:
            raise ValueError("times and powers must be 1-d arrays of equal length")
        if not np.all(np.isfinite(t)):
            raise ValueError("sample times must be finite")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("sample times must be strictly increasing")
        if np.any(~(p >= 0)) or np.any(np.isinf(p)):
            raise ValueError("sample powers must be finite and non-negative")

    @classmethod
    def from_samples(cls, source_id: str, nominal_interval: float, samples: Iterable[tuple[float, float]]) -> "PowerTrace":
        pairs = list(samples)
        t = [s[0] for s in pairs]
        p = [s[1] for s in pairs]
        return cls(source_id, nominal_interval, np.asarray(t, dtype=float), np.asarray(p, dtype=float))

    @property
    def samples(self) -> list[PowerSample]:
        return [PowerSample(float(t), float(p)) for t, p in zip(self.times, self.powers)]

    def __len__(self) -> int:
        return int(self.times.size)

    def shifted(self, offset: float) -> "PowerTrace":
        return PowerTrace(self.source_id, self.nominal_interval, self.times + offset, self.powers)

    def window(self, t0: float, t1: float) -> "PowerTrace":
        """Samples with ``t0 <= t < t1``."""
        lo = np.searchsorted(self.times, t0, side="left")
        hi = np.searchsorted(self.times, t1, side="left")
        return PowerTrace(self.source_id, self.nominal_interval, self.times[lo:hi], self.powers[lo:hi])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PowerTrace):
            return NotImplemented
        return (
            self.source_id == other.source_id
            and self.nominal_interval == other.nominal_interval
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.powers, other.powers)
        )


class CounterDomain(str, Enum):
    CPU_PACKAGE = "cpu_package"
    DRAM = "dram"


@dataclass(frozen=True, eq=False)
class EnergyCounterTrace:
    """Cumulative energy-counter snapshots (microjoules) of one RAPL domain."""

    domain: CounterDomain
    wrap_range: int
    times: np.ndarray
    counters: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "domain", CounterDomain(self.domain))
        t = _frozen(self.times)
        c = _frozen(self.counters, dtype=np.int64)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "counters", c)
        if not self.wrap_range > 0:
            raise ValueError("wrap_range must be > 0")
        if t.shape != c.shape or t.ndim != 1:
            raise ValueError("times and counters must be 1-d arrays of equal length")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("counter readings must be strictly increasing in time")
        if np.any(c < 0) or np.any(c >= self.wrap_range):
            raise ValueError(f"counter values must lie in [0, {self.wrap_range})")

    @classmethod
    def from_readings(cls, domain, wrap_range: int, readings: Iterable[tuple[float, int]]) -> "EnergyCounterTrace":
        pairs = list(readings)
        return cls(domain, int(wrap_range), np.asarray([r[0] for r in pairs], dtype=float),
                   np.asarray([r[1] for r in pairs], dtype=np.int64))

    @property
    def readings(self) -> list[tuple[float, int]]:
        return [(float(t), int(c)) for t, c in zip(self.times, self.counters)]

    def __len__(self) -> int:
        return int(self.times.size)

    def shifted(self, offset: float) -> "EnergyCounterTrace":
        return EnergyCounterTrace(self.domain, self.wrap_range, self.times + offset, self.counters)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EnergyCounterTrace):
            return NotImplemented
        return (
            self.domain == other.domain
            and self.wrap_range == other.wrap_range
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.counters, other.counters)
        )


@dataclass(frozen=True)
class SessionLog:
    session_id: str
    epochs: tuple[tuple[float, float], ...]
    memory_gb: float
    gpu_count: int = 1
    gpu_nominal_rate: float = 10.0

    def __post_init__(self) -> None:
        epochs = tuple((float(s), float(e)) for s, e in self.epochs)
        object.__setattr__(self, "epochs", epochs)
        if not self.memory_gb > 0:
            raise ValueError("memory_gb must be > 0")
        if int(self.gpu_count) != self.gpu_count or self.gpu_count < 1:
            raise ValueError("gpu_count must be an integer >= 1")
        if not self.gpu_nominal_rate > 0:
            raise ValueError("gpu_nominal_rate must be > 0")
        prev_end = -math.inf
        for i, (s, e) in enumerate(epochs):
            if not (math.isfinite(s) and math.isfinite(e)):
                raise ValueError(f"epoch {i} has non-finite bounds")
            if not s < e:
                raise ValueError(f"epoch {i} is empty or reversed: [{s}, {e})")
            if s < prev_end:
                raise ValueError(f"epoch {i} starts at {s} before the previous epoch ends at {prev_end}")
            prev_end = e

    @property
    def duration(self) -> float:
        if not self.epochs:
            return 0.0
        return self.epochs[-1][1] - self.epochs[0][0]


def _check_window(t0: float, t1: float) -> None:
    if not t0 < t1:
        raise InvalidWindowError(t0, t1)


def integrate_power(trace: PowerTrace, t0: float, t1: float, method: str = "rectangle") -> EnergyQuantity:
    """Energy drawn over ``[t0, t1]``.

    ``rectangle`` lets every sample hold its value for ``nominal_interval``
    seconds, clipping the coverage to the window (a sample just before ``t0``
    contributes the part of its interval that reaches into the window).
    ``trapezoid`` integrates the piecewise-linear interpolant of the samples,
    without extrapolating beyond the first and last sample.
    """
    _check_window(t0, t1)
    t, p = trace.times, trace.powers
    lo = np.searchsorted(t, t0 - TIME_EPS, side="left")
    hi = np.searchsorted(t, t1 + TIME_EPS, side="right")
    n_in = hi - lo
    if method == "rectangle":
        if n_in < 1:
            raise NoSamplesInWindowError(t0, t1, 1)
        start = max(lo - 1, 0)
        ts = t[start:hi]
        cover = np.minimum(ts + trace.nominal_interval, t1) - np.maximum(ts, t0)
        joules = float(np.dot(p[start:hi], np.clip(cover, 0.0, None)))
    elif method == "trapezoid":
        if n_in < 2:
            raise NoSamplesInWindowError(t0, t1, 2)
        a, b = max(t0, t[0]), min(t1, t[-1])
        inner = (t > a) & (t < b)
        xs = np.concatenate(([a], t[inner], [b]))
        ys = np.interp(xs, t, p)
        joules = float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))
    else:
        raise ValueError(f"unknown integration method {method!r}")
    return EnergyQuantity(max(joules, 0.0))


def mean_power(trace: PowerTrace, t0: float, t1: float) -> float:
    return integrate_power(trace, t0, t1, "rectangle").joules / (t1 - t0)


def counter_delta(
    trace: EnergyCounterTrace,
    t0: float,
    t1: float,
    max_power_w: float | None = None,
) -> EnergyQuantity:
    """Energy accumulated by a wrapping counter between two readings.

    The window snaps outwards to the last reading at or before ``t0`` and the
    first reading at or after ``t1``. Each step is corrected for at most one
    wraparound. When ``max_power_w`` is given, a step long enough for the
    counter to wrap more than once at that power is rejected as ambiguous.
    """
    return _counter_span(trace, t0, t1, max_power_w)[0]


def _counter_span(
    trace: EnergyCounterTrace, t0: float, t1: float, max_power_w: float | None = None
) -> tuple[EnergyQuantity, float, float]:
    _check_window(t0, t1)
    t = trace.times
    i0 = int(np.searchsorted(t, t0 + TIME_EPS, side="right")) - 1
    i1 = int(np.searchsorted(t, t1 - TIME_EPS, side="left"))
    if i0 < 0 or i1 >= t.size or i1 <= i0:
        raise InsufficientDataError(
            f"{trace.domain.value}: need readings at or before {t0} and at or after {t1}"
        )
    c = trace.counters[i0 : i1 + 1].astype(np.int64)
    steps = np.diff(c)
    steps = np.where(steps < 0, steps + trace.wrap_range, steps)
    if max_power_w is not None:
        dt = np.diff(t[i0 : i1 + 1])
        if np.any(dt * max_power_w * UJ_PER_J >= trace.wrap_range):
            raise UnreliableCounterError(
                f"{trace.domain.value}: reading gap long enough for multiple wraparounds at {max_power_w} W"
            )
    return EnergyQuantity.from_microjoules(float(steps.sum())), float(t[i0]), float(t[i1])


def counter_mean_power(trace: EnergyCounterTrace, t0: float, t1: float) -> float:
    """Mean power over the snapped span the counter delta actually covers."""
    e, ta, tb = _counter_span(trace, t0, t1)
    return e.joules / (tb - ta)


def sum_channels(channels: Sequence[float]) -> float:
    return math.fsum(channels)
