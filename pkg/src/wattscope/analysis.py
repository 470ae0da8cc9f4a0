"""Per-epoch energy accounting and sampler-pathology detection.

Epochs are half-open ``[start, end)``: a sample exactly on a boundary belongs
to the later epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union

import numpy as np

from wattscope.calibrate import CalibrationProfile, adjusted_gpu_power
from wattscope.core import (
    EnergyCounterTrace,
    EnergyQuantity,
    PowerTrace,
    SessionLog,
    counter_delta,
    integrate_power,
)
from wattscope.errors import CalibrationError, DomainError, InsufficientDataError, NoSamplesInWindowError, UsageError
from wattscope.stats import DEFAULT_ALPHA, CorrelationReport, correlation_report, pearson

Source = Union[PowerTrace, EnergyCounterTrace, Sequence[PowerTrace]]

DEFAULT_MIN_SAMPLES = 10
DEFAULT_MIN_RATIO = 0.5


@dataclass(frozen=True)
class UndersamplePolicy:
    """``absolute``: flag when count <= value. ``ratio``: flag when count < value * expected."""

    kind: str = "absolute"
    value: float = DEFAULT_MIN_SAMPLES

    def __post_init__(self) -> None:
        if self.kind not in ("absolute", "ratio"):
            raise ValueError(f"unknown undersampling policy {self.kind!r}")
        if self.value < 0:
            raise ValueError("policy threshold must be non-negative")

    @classmethod
    def absolute(cls, k: int = DEFAULT_MIN_SAMPLES) -> "UndersamplePolicy":
        return cls("absolute", k)

    @classmethod
    def ratio(cls, r: float = DEFAULT_MIN_RATIO) -> "UndersamplePolicy":
        return cls("ratio", r)

    @classmethod
    def parse(cls, text: str) -> "UndersamplePolicy":
        """``absolute:10`` or ``ratio:0.5``; a bare kind uses its default."""
        kind, _, val = text.partition(":")
        kind = kind.strip()
        try:
            if kind == "absolute":
                return cls.absolute(int(val) if val else DEFAULT_MIN_SAMPLES)
            if kind == "ratio":
                return cls.ratio(float(val) if val else DEFAULT_MIN_RATIO)
        except ValueError:
            pass
        raise UsageError(f"bad undersampling policy {text!r}; use absolute:<k> or ratio:<r>")

    def flags(self, count: int, expected: int) -> bool:
        if self.kind == "absolute":
            return count <= self.value
        return count < self.value * expected

    def __str__(self) -> str:
        v = int(self.value) if self.kind == "absolute" else self.value
        return f"{self.kind}:{v}"


def expected_samples(duration: float, rate_hz: float) -> int:
    return max(1, int(math.floor(duration * rate_hz + 1e-9)))


@dataclass
class EpochEnergy:
    epoch_idx: int
    start: float
    end: float
    energy: dict[str, EnergyQuantity | None] = field(default_factory=dict)
    sample_count: dict[str, int] = field(default_factory=dict)
    expected_samples: dict[str, int] = field(default_factory=dict)
    undersampled: dict[str, bool] = field(default_factory=dict)

    @property
    def duration(self) -> float:
        return self.end - self.start

    def mean_power(self, source: str) -> float | None:
        e = self.energy.get(source)
        return None if e is None else e.joules / self.duration


def segment_epochs(trace: PowerTrace, session: SessionLog) -> tuple[list[PowerTrace], int]:
    """Split a trace by epoch; also return how many samples fell outside every epoch."""
    parts = [trace.window(s, e) for s, e in session.epochs]
    return parts, len(trace) - sum(len(p) for p in parts)


def _as_list(src) -> list[PowerTrace]:
    return [src] if isinstance(src, PowerTrace) else list(src)


def epoch_energy_table(
    session: SessionLog,
    traces: Mapping[str, Source],
    policy: UndersamplePolicy = UndersamplePolicy(),
    derived: Mapping[str, Sequence[EnergyQuantity | None]] | None = None,
) -> list[EpochEnergy]:
    """Energy per epoch and source.

    Power traces integrate with the rectangle rule, counter traces take the
    wrap-corrected delta. A list of power traces is one source spread over
    several GPUs: energies add, and the smallest per-GPU sample count
    stands for the source. Cells without coverage are ``None``, never zero.
    """
    table = [EpochEnergy(i, s, e) for i, (s, e) in enumerate(session.epochs)]
    for name, src in traces.items():
        if isinstance(src, EnergyCounterTrace):
            for row in table:
                try:
                    row.energy[name] = counter_delta(src, row.start, row.end)
                except DomainError:
                    row.energy[name] = None
            continue
        gpus = _as_list(src)
        for row in table:
            counts = [len(g.window(row.start, row.end)) for g in gpus]
            count = min(counts) if counts else 0
            rate = 1.0 / gpus[0].nominal_interval if gpus else session.gpu_nominal_rate
            expected = expected_samples(row.duration, rate)
            row.sample_count[name] = count
            row.expected_samples[name] = expected
            row.undersampled[name] = policy.flags(count, expected)
            if count == 0:
                row.energy[name] = None
            else:
                row.energy[name] = EnergyQuantity(
                    sum(integrate_power(g, row.start, row.end).joules for g in gpus)
                )
    for name, cells in (derived or {}).items():
        if len(cells) != len(table):
            raise ValueError(f"derived source {name!r} has {len(cells)} cells for {len(table)} epochs")
        for row, cell in zip(table, cells):
            row.energy[name] = cell
    return table


def reference_gpu_energy(
    session: SessionLog,
    meter: PowerTrace,
    cpu: EnergyCounterTrace,
    dram: EnergyCounterTrace,
    profile: CalibrationProfile,
    off_socket: float | None = None,
    strict: bool = True,
) -> list[EnergyQuantity | None]:
    """Meter-derived GPU energy per epoch (busy off-socket level by default).

    With ``strict`` off, epochs whose derived power is inconsistent (below
    the clamp) become ``None`` instead of raising.
    """
    out: list[EnergyQuantity | None] = []
    for s, e in session.epochs:
        if len(meter.window(s, e)) == 0:
            out.append(None)
            continue
        try:
            w = adjusted_gpu_power(meter, cpu, dram, profile, (s, e), off_socket)
        except (InsufficientDataError, NoSamplesInWindowError):
            out.append(None)
            continue
        except CalibrationError:
            if strict:
                raise
            out.append(None)
            continue
        out.append(EnergyQuantity(w * (e - s)))
    return out


def undersampled(epoch: EpochEnergy, source: str, policy: UndersamplePolicy = UndersamplePolicy()) -> bool:
    return policy.flags(epoch.sample_count[source], epoch.expected_samples[source])


def corrected_view(table: Sequence[EpochEnergy], source: str,
                   policy: UndersamplePolicy = UndersamplePolicy()) -> list[EpochEnergy]:
    return [row for row in table if not undersampled(row, source, policy)]


def flagged_fraction(table: Sequence[EpochEnergy], source: str,
                     policy: UndersamplePolicy = UndersamplePolicy()) -> float:
    if not table:
        return 0.0
    return sum(undersampled(r, source, policy) for r in table) / len(table)


def paired(table: Sequence[EpochEnergy], source: str, reference: str,
           basis: str = "energy") -> tuple[np.ndarray, np.ndarray]:
    """Values of two sources over epochs where both cells are present."""
    xs, ys = [], []
    for row in table:
        a, b = row.energy.get(source), row.energy.get(reference)
        if a is None or b is None:
            continue
        if basis == "energy":
            xs.append(a.joules)
            ys.append(b.joules)
        elif basis == "mean_power":
            xs.append(a.joules / row.duration)
            ys.append(b.joules / row.duration)
        else:
            raise ValueError(f"unknown basis {basis!r}")
    return np.asarray(xs), np.asarray(ys)


def compare_sources(table: Sequence[EpochEnergy], source: str, reference: str,
                    alpha: float = DEFAULT_ALPHA, basis: str = "energy") -> CorrelationReport:
    xs, ys = paired(table, source, reference, basis)
    return correlation_report(xs, ys, alpha)


def full_training_totals(table: Sequence[EpochEnergy]) -> dict[str, EnergyQuantity | None]:
    """Per-source sums; a source with any missing epoch has no total."""
    names: list[str] = []
    for row in table:
        for k in row.energy:
            if k not in names:
                names.append(k)
    out: dict[str, EnergyQuantity | None] = {}
    for k in names:
        cells = [row.energy.get(k) for row in table]
        out[k] = None if any(c is None for c in cells) else EnergyQuantity(math.fsum(c.joules for c in cells))
    return out


def sample_energy_correlation(table: Sequence[EpochEnergy], source: str) -> float:
    """Pearson correlation of per-epoch sample count with per-epoch energy."""
    counts, energies = [], []
    for row in table:
        e = row.energy.get(source)
        if e is None:
            continue
        counts.append(row.sample_count[source])
        energies.append(e.joules)
    return pearson(counts, energies)


@dataclass(frozen=True)
class UsageRow:
    mean_power: float
    std_power: float
    mean_util: float
    std_util: float
    mean_mem_util: float
    std_mem_util: float


@dataclass(frozen=True)
class UsageSummary:
    rows: list[UsageRow]
    power_vs_util: float
    power_vs_mem_util: float


def usage_power_summary(
    power_epochs: Sequence[Sequence[float]],
    utilization_epochs: Sequence[Sequence[float]],
    memory_util_epochs: Sequence[Sequence[float]],
) -> UsageSummary:
    """Per-epoch means and spreads of power, GPU and memory utilisation."""
    if not len(power_epochs) == len(utilization_epochs) == len(memory_util_epochs):
        raise ValueError("power, utilisation and memory series need one entry per epoch")
    rows = []
    for p, u, m in zip(power_epochs, utilization_epochs, memory_util_epochs):
        p, u, m = (np.asarray(a, dtype=float) for a in (p, u, m))
        if p.size == 0 or u.size == 0 or m.size == 0:
            raise ValueError("every epoch needs at least one sample per series")
        rows.append(UsageRow(p.mean(), p.std(), u.mean(), u.std(), m.mean(), m.std()))
    power = [r.mean_power for r in rows]
    return UsageSummary(
        rows,
        pearson(power, [r.mean_util for r in rows]),
        pearson(power, [r.mean_mem_util for r in rows]),
    )
