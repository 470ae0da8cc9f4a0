"""Off-socket calibration and meter-derived GPU power.

A node meter sees everything: CPU package, DRAM, GPUs and the rest of the
board (fans, storage, PSU losses). The rest is not visible to any on-node
sensor, so it is measured as a residual during idle and busy calibration runs
and then subtracted from the meter during training.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from wattscope.core import EnergyCounterTrace, PowerTrace, counter_mean_power, mean_power
from wattscope.errors import CalibrationError, DataFormatError

NEGATIVE_CLAMP_W = 1.0
DEFAULT_TRANSIENT_S = 2.0
RECOMMENDED_RUN_S = 60.0

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CalibrationProfile:
    p_idle_off_socket: float
    p_busy_off_socket: float
    p_load_estimate: float | None = None

    def __post_init__(self) -> None:
        if self.p_idle_off_socket < 0:
            raise CalibrationError(f"idle off-socket power must be >= 0 W, got {self.p_idle_off_socket}")
        if self.p_idle_off_socket > self.p_busy_off_socket:
            raise CalibrationError(
                f"idle off-socket power {self.p_idle_off_socket} W exceeds busy {self.p_busy_off_socket} W; "
                "re-measure the calibration runs"
            )
        load = self.p_load_estimate
        if load is not None and not self.p_idle_off_socket <= load <= self.p_busy_off_socket:
            raise CalibrationError(
                f"load estimate {load} W lies outside [{self.p_idle_off_socket}, {self.p_busy_off_socket}] W"
            )

    @property
    def width(self) -> float:
        return self.p_busy_off_socket - self.p_idle_off_socket

    def to_text(self) -> str:
        lines = [f"p_idle_w={self.p_idle_off_socket!r}", f"p_busy_w={self.p_busy_off_socket!r}"]
        if self.p_load_estimate is not None:
            lines.append(f"p_load_w={self.p_load_estimate!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CalibrationProfile":
        vals: dict[str, float] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataFormatError(f"line {lineno}: expected key=value, got {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            try:
                vals[k] = float(v)
            except ValueError:
                raise DataFormatError(f"line {lineno}: {k} is not a number: {v!r}") from None
        for key in ("p_idle_w", "p_busy_w"):
            if key not in vals:
                raise DataFormatError(f"calibration profile lacks {key}")
        return cls(vals["p_idle_w"], vals["p_busy_w"], vals.get("p_load_w"))

    @classmethod
    def load(cls, path: str | Path) -> "CalibrationProfile":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _gpu_mean(gpu: PowerTrace | Sequence[PowerTrace] | None, t0: float, t1: float) -> float:
    if gpu is None:
        return 0.0
    if isinstance(gpu, PowerTrace):
        gpu = [gpu]
    return sum(mean_power(g, t0, t1) for g in gpu)


def off_socket_power(
    meter: PowerTrace,
    cpu: EnergyCounterTrace,
    dram: EnergyCounterTrace,
    gpu: PowerTrace | Sequence[PowerTrace] | None,
    window: tuple[float, float],
) -> float:
    """Mean node power left over once CPU, DRAM and GPU draw are removed."""
    t0, t1 = window
    residual = (
        mean_power(meter, t0, t1)
        - counter_mean_power(cpu, t0, t1)
        - counter_mean_power(dram, t0, t1)
        - _gpu_mean(gpu, t0, t1)
    )
    if residual < 0:
        raise CalibrationError(
            f"negative off-socket residual {residual:.3f} W in [{t0}, {t1}]: "
            "traces may be mislabeled or the meter clock misaligned"
        )
    return residual


@dataclass(frozen=True)
class CalibrationRun:
    meter: PowerTrace
    cpu: EnergyCounterTrace
    dram: EnergyCounterTrace
    gpu: Sequence[PowerTrace] = ()
    window: tuple[float, float] | None = None

    def resolved_window(self, transient_s: float = DEFAULT_TRANSIENT_S) -> tuple[float, float]:
        if self.window is not None:
            return self.window
        t0 = max(float(self.meter.times[0]), float(self.cpu.times[0]), float(self.dram.times[0]))
        t1 = min(float(self.meter.times[-1]) + self.meter.nominal_interval,
                 float(self.cpu.times[-1]), float(self.dram.times[-1]))
        t0, t1 = t0 + transient_s, t1 - transient_s
        if not t0 < t1:
            raise CalibrationError(
                f"calibration run too short once {transient_s} s transients are trimmed from each end"
            )
        if t1 - t0 < RECOMMENDED_RUN_S:
            log.warning("calibration window is %.1f s; runs of at least %.0f s give steadier offsets",
                        t1 - t0, RECOMMENDED_RUN_S)
        return t0, t1

    def off_socket(self, transient_s: float = DEFAULT_TRANSIENT_S) -> float:
        return off_socket_power(self.meter, self.cpu, self.dram, list(self.gpu),
                                self.resolved_window(transient_s))


def build_profile(
    idle_run: CalibrationRun | float,
    busy_run: CalibrationRun | float,
    load_run: CalibrationRun | float | None = None,
    transient_s: float = DEFAULT_TRANSIENT_S,
) -> CalibrationProfile:
    """Profile from calibration runs, or from already-derived residuals in watts."""

    def resolve(run):
        if run is None or isinstance(run, (int, float)):
            return run
        return run.off_socket(transient_s)

    return CalibrationProfile(resolve(idle_run), resolve(busy_run), resolve(load_run))


def adjusted_gpu_power(
    meter: PowerTrace,
    cpu: EnergyCounterTrace,
    dram: EnergyCounterTrace,
    profile: CalibrationProfile,
    window: tuple[float, float],
    off_socket: float | None = None,
) -> float:
    """GPU power implied by the meter: total minus CPU, DRAM and off-socket draw.

    ``off_socket`` defaults to the profile's busy level. Results in
    ``[-1 W, 0)`` are clamped to zero; anything lower is an inconsistency.
    """
    t0, t1 = window
    sub = profile.p_busy_off_socket if off_socket is None else off_socket
    value = mean_power(meter, t0, t1) - counter_mean_power(cpu, t0, t1) - counter_mean_power(dram, t0, t1) - sub
    if value < -NEGATIVE_CLAMP_W:
        raise CalibrationError(
            f"meter-derived GPU power {value:.3f} W in [{t0}, {t1}] is below -{NEGATIVE_CLAMP_W} W"
        )
    return max(value, 0.0)


def adjusted_gpu_interval(
    meter: PowerTrace,
    cpu: EnergyCounterTrace,
    dram: EnergyCounterTrace,
    profile: CalibrationProfile,
    window: tuple[float, float],
) -> tuple[float, float]:
    """``(low, high)`` GPU power using the busy and idle off-socket levels."""
    t0, t1 = window
    raw = mean_power(meter, t0, t1) - counter_mean_power(cpu, t0, t1) - counter_mean_power(dram, t0, t1)
    low = raw - profile.p_busy_off_socket
    high = raw - profile.p_idle_off_socket
    if high < -NEGATIVE_CLAMP_W:
        raise CalibrationError(f"meter-derived GPU power {high:.3f} W in [{t0}, {t1}] is below -{NEGATIVE_CLAMP_W} W")
    return max(low, 0.0), max(high, 0.0)
