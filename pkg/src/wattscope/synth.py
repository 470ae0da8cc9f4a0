"""Synthetic training sessions with known ground truth.

A node is modelled as CPU + DRAM + GPU + off-socket draw. GPU power is
piecewise constant per epoch, switching between a low and a high state.
Epoch boundaries fall on the 10 Hz meter tick so the dense ground-truth
traces integrate exactly to the closed-form energies.

Two optional effects shape the per-epoch statistics:

* ``low_duration_factor`` stretches low-power epochs (the GPU is starved,
  so a fixed amount of work takes longer).
* ``clock_jitter`` draws a per-epoch clock factor ``f``; power scales as
  ``f**3`` and duration as ``1/f``, the usual dynamic-voltage-frequency
  scaling approximation.

Samplers observe the GPU trace. ``RateCollapse`` keeps at most
``collapsed_count`` samples in every epoch whose true power is under the
threshold and leaves all other epochs untouched.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence, Union

import numpy as np

from wattscope.calibrate import CalibrationProfile
from wattscope.core import CounterDomain, EnergyCounterTrace, EnergyQuantity, PowerTrace, SessionLog
from wattscope.errors import DataFormatError
from wattscope.ingest import (
    CodeCarbonRow,
    RawMeterRecord,
    write_codecarbon_log,
    write_gpu_sampler_csv,
    write_meter_csv,
    write_rapl_log,
    write_session_log,
)
from wattscope.report import memory_power_estimate
from wattscope.util import atomic_write

RAPL_WRAP_UJ = 262_143_328_850
METER_TICK = 0.1


@dataclass(frozen=True)
class WorkloadSpec:
    epoch_count: int = 200
    epoch_duration: Union[float, tuple[float, ...]] = 11.8
    low_power: float = 146.0
    high_power: float = 305.0
    low_fraction: float = 0.4
    cpu_power: float = 150.0
    mem_power: float = 12.0
    off_socket: float = 811.0
    seed: int = 0
    memory_gb: float = 2000.0
    low_duration_factor: float = 1.0
    clock_jitter: float = 0.0
    session_id: str = "synthetic"

    def __post_init__(self) -> None:
        if isinstance(self.epoch_duration, (list, tuple)):
            object.__setattr__(self, "epoch_duration", tuple(float(d) for d in self.epoch_duration))
            if len(self.epoch_duration) != self.epoch_count:
                raise ValueError("per-epoch duration list must have epoch_count entries")
            if min(self.epoch_duration, default=1.0) <= 0:
                raise ValueError("epoch durations must be positive")
        elif not self.epoch_duration > 0:
            raise ValueError("epoch_duration must be positive")
        if self.epoch_count < 0:
            raise ValueError("epoch_count must be >= 0")
        if not 0.0 <= self.low_fraction <= 1.0:
            raise ValueError("low_fraction must lie in [0, 1]")
        if not self.low_power < self.high_power:
            raise ValueError("low_power must be below high_power")
        if min(self.low_power, self.cpu_power, self.mem_power, self.off_socket) < 0:
            raise ValueError("component powers must be non-negative")
        if self.low_duration_factor <= 0 or self.clock_jitter < 0:
            raise ValueError("low_duration_factor must be > 0 and clock_jitter >= 0")


@dataclass(frozen=True)
class Ideal:
    kind = "ideal"


@dataclass(frozen=True)
class RateCollapse:
    threshold_w: float = 200.0
    collapsed_count: int = 10
    kind = "rate_collapse"

    def __post_init__(self) -> None:
        if self.collapsed_count < 1:
            raise ValueError("collapsed_count must be >= 1")


@dataclass(frozen=True)
class GaussianNoise:
    sigma_w: float = 5.0
    kind = "gaussian_noise"


Pathology = Union[Ideal, RateCollapse, GaussianNoise]


@dataclass(frozen=True)
class SamplerSpec:
    name: str = "smi"
    nominal_rate: float = 10.0
    pathology: Pathology = field(default_factory=Ideal)

    def __post_init__(self) -> None:
        if not self.nominal_rate > 0:
            raise ValueError("nominal_rate must be > 0")


@dataclass(frozen=True)
class EpochPlan:
    low: np.ndarray
    clock: np.ndarray
    power: np.ndarray
    ticks: np.ndarray

    @property
    def boundaries(self) -> np.ndarray:
        """Tick index of every epoch start plus the final end."""
        return np.concatenate(([0], np.cumsum(self.ticks)))


def epoch_plan(workload: WorkloadSpec) -> EpochPlan:
    """Per-epoch state, clock factor, GPU power and length in meter ticks."""
    n = workload.epoch_count
    rng = np.random.default_rng([workload.seed, 0])
    low = np.zeros(n, dtype=bool)
    low[rng.permutation(n)[: int(round(workload.low_fraction * n))]] = True
    if workload.clock_jitter > 0:
        clock = np.clip(1.0 + workload.clock_jitter * rng.standard_normal(n), 0.5, 1.5)
    else:
        clock = np.ones(n)
    base = np.asarray(workload.epoch_duration if isinstance(workload.epoch_duration, tuple)
                      else [workload.epoch_duration] * n, dtype=float)
    dur = base * np.where(low, workload.low_duration_factor, 1.0) / clock
    ticks = np.maximum(1, np.rint(dur / METER_TICK)).astype(np.int64)
    power = np.where(low, workload.low_power, workload.high_power) * clock ** 3
    return EpochPlan(low, clock, power, ticks)


@dataclass
class SyntheticSession:
    workload: WorkloadSpec
    samplers: tuple[SamplerSpec, ...]
    session: SessionLog
    plan: EpochPlan
    truth: dict[str, PowerTrace]
    sampled: dict[str, PowerTrace]
    rapl: dict[CounterDomain, EnergyCounterTrace]
    codecarbon: list[CodeCarbonRow]
    meter_records: list[RawMeterRecord]
    analytic: dict[str, Any]
    profile: CalibrationProfile


def _epoch_energies(workload: WorkloadSpec, plan: EpochPlan) -> dict[str, list[float]]:
    secs = plan.ticks * METER_TICK
    out = {
        "gpu": [float(p * s) for p, s in zip(plan.power, secs)],
        "cpu": [workload.cpu_power * float(s) for s in secs],
        "mem": [workload.mem_power * float(s) for s in secs],
        "off_socket": [workload.off_socket * float(s) for s in secs],
    }
    out["node"] = [math.fsum(v) for v in zip(out["gpu"], out["cpu"], out["mem"], out["off_socket"])]
    return out


def analytic_energy(workload: WorkloadSpec, epoch_idx: int | None = None,
                    component: str = "gpu") -> EnergyQuantity:
    """Closed-form energy of one epoch, or of the whole session when ``epoch_idx`` is None."""
    per = _epoch_energies(workload, epoch_plan(workload))[component]
    if epoch_idx is None:
        return EnergyQuantity(math.fsum(per))
    return EnergyQuantity(per[epoch_idx])


def _sample(spec: SamplerSpec, index: int, workload: WorkloadSpec, plan: EpochPlan) -> PowerTrace:
    rng = np.random.default_rng([workload.seed, 1, index])
    interval = 1.0 / spec.nominal_rate
    total_t = int(plan.boundaries[-1]) * METER_TICK
    n = int(math.ceil(total_t * spec.nominal_rate - 1e-9))
    t = np.arange(n) * interval
    t = t[t < total_t]
    starts = plan.boundaries[:-1] * METER_TICK
    epoch_of = np.searchsorted(starts, t, side="right") - 1
    p = plan.power[epoch_of]
    keep = np.ones(t.size, dtype=bool)
    path = spec.pathology
    if isinstance(path, RateCollapse):
        for e in np.nonzero(plan.power < path.threshold_w)[0]:
            idx = np.nonzero(epoch_of == e)[0]
            if idx.size > path.collapsed_count:
                chosen = rng.choice(idx, size=path.collapsed_count, replace=False)
                keep[idx] = False
                keep[chosen] = True
    elif isinstance(path, GaussianNoise):
        p = np.clip(p + rng.normal(0.0, path.sigma_w, size=p.size), 0.0, None)
    return PowerTrace(spec.name, interval, t[keep], p[keep])


def _counter_trace(domain: CounterDomain, power_w: float, times: np.ndarray,
                   rng: np.random.Generator) -> EnergyCounterTrace:
    start = int(rng.integers(0, RAPL_WRAP_UJ))
    cum = np.rint(power_w * times * 1e6).astype(np.int64)
    return EnergyCounterTrace(domain, RAPL_WRAP_UJ, times, (start + cum) % RAPL_WRAP_UJ)


def generate_session(
    workload: WorkloadSpec,
    samplers: Sequence[SamplerSpec] = (SamplerSpec(),),
    profile: CalibrationProfile | None = None,
    meter_clock_offset: float = 0.0,
) -> SyntheticSession:
    """Deterministic session for a given workload seed.

    ``meter_clock_offset`` is added to the session clock to give the meter's
    own timestamps. Without ``profile`` the calibration is taken to be exact
    (idle = busy = the true off-socket draw).
    """
    samplers = tuple(samplers)
    for s in samplers:
        if isinstance(s.pathology, RateCollapse) and s.pathology.threshold_w > workload.high_power:
            warnings.warn(f"sampler {s.name!r}: collapse threshold above high_power, pathology never triggers",
                          stacklevel=2)
        if isinstance(s.pathology, RateCollapse) and s.pathology.threshold_w <= workload.low_power:
            warnings.warn(f"sampler {s.name!r}: collapse threshold at or below low_power", stacklevel=2)
    plan = epoch_plan(workload)
    bounds = plan.boundaries
    k_total = int(bounds[-1])
    times = np.arange(k_total) * METER_TICK
    epochs = tuple((float(bounds[i] * METER_TICK), float(bounds[i + 1] * METER_TICK))
                   for i in range(workload.epoch_count))
    session = SessionLog(workload.session_id, epochs, workload.memory_gb, 1, samplers[0].nominal_rate if samplers else 10.0)

    gpu = np.repeat(plan.power, plan.ticks)
    ones = np.ones(k_total)
    truth = {
        "gpu": PowerTrace("gpu_truth", METER_TICK, times, gpu),
        "cpu": PowerTrace("cpu_truth", METER_TICK, times, ones * workload.cpu_power),
        "mem": PowerTrace("mem_truth", METER_TICK, times, ones * workload.mem_power),
        "off_socket": PowerTrace("off_socket_truth", METER_TICK, times, ones * workload.off_socket),
    }
    meter = gpu + workload.cpu_power + workload.mem_power + workload.off_socket
    truth["meter"] = PowerTrace("meter", METER_TICK, times, meter)
    meter_records = [RawMeterRecord(float(t + meter_clock_offset), (q, q, q, q))
                     for t, q in zip(times, (meter / 4.0).tolist())]

    sampled = {s.name: _sample(s, i, workload, plan) for i, s in enumerate(samplers)}
    if len(sampled) != len(samplers):
        raise ValueError("sampler names must be unique")

    rng = np.random.default_rng([workload.seed, 2])
    rapl_t = np.concatenate(([0.0], [e for _, e in epochs])) if epochs else np.array([0.0])
    rapl = {
        CounterDomain.CPU_PACKAGE: _counter_trace(CounterDomain.CPU_PACKAGE, workload.cpu_power, rapl_t, rng),
        CounterDomain.DRAM: _counter_trace(CounterDomain.DRAM, workload.mem_power, rapl_t, rng),
    }

    cc_t = np.arange(k_total + 1) * METER_TICK
    gpu_cum = np.concatenate(([0.0], np.cumsum(gpu * METER_TICK)))
    mem_w = memory_power_estimate(workload.memory_gb)
    codecarbon = [CodeCarbonRow(float(t), float(g), workload.cpu_power * float(t), mem_w * float(t))
                  for t, g in zip(cc_t, gpu_cum)]

    per = _epoch_energies(workload, plan)
    analytic = {
        "epochs": [
            {
                "epoch_idx": i,
                "start_s": epochs[i][0],
                "end_s": epochs[i][1],
                "gpu_power_w": float(plan.power[i]),
                "low_power_state": bool(plan.low[i]),
                **{f"{k}_j": per[k][i] for k in per},
            }
            for i in range(workload.epoch_count)
        ],
        "total": {f"{k}_j": math.fsum(v) for k, v in per.items()},
        "duration_s": k_total * METER_TICK,
        "workload": _workload_dict(workload),
    }
    if profile is None:
        profile = CalibrationProfile(workload.off_socket, workload.off_socket)
    return SyntheticSession(workload, samplers, session, plan, truth, sampled, rapl, codecarbon,
                            meter_records, analytic, profile)


def _workload_dict(w: WorkloadSpec) -> dict:
    d = asdict(w)
    if isinstance(d["epoch_duration"], tuple):
        d["epoch_duration"] = list(d["epoch_duration"])
    return d


def write_session(s: SyntheticSession, out_dir: str | Path) -> Path:
    """Write every ingest file plus ``analytic.json`` and ``calibration.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "session.csv", write_session_log(s.session))
    atomic_write(out / "meter.csv", write_meter_csv(s.meter_records))
    for i, spec in enumerate(s.samplers):
        atomic_write(out / f"gpu_{i}.csv", write_gpu_sampler_csv(s.sampled[spec.name], {"gpu_index": "0"}))
    atomic_write(out / "rapl.csv", write_rapl_log(s.rapl.values()))
    atomic_write(out / "codecarbon.csv", write_codecarbon_log(s.codecarbon))
    atomic_write(out / "calibration.txt", s.profile.to_text())
    atomic_write(out / "analytic.json", json.dumps(s.analytic, sort_keys=True, indent=2) + "\n")
    return out


# -- spec files -----------------------------------------------------------------

def _pathology_from(d: dict | None) -> Pathology:
    if not d:
        return Ideal()
    d = dict(d)
    kind = d.pop("kind", "ideal")
    if kind == "ideal":
        return Ideal()
    if kind == "rate_collapse":
        return RateCollapse(**d)
    if kind == "gaussian_noise":
        return GaussianNoise(**d)
    raise DataFormatError(f"unknown sampler pathology {kind!r}")


def load_synth_spec(text: str) -> tuple[WorkloadSpec, tuple[SamplerSpec, ...], CalibrationProfile | None, float]:
    """Parse a JSON synth spec.

    ``{"workload": {...}, "samplers": [{"name", "nominal_rate",
    "pathology": {"kind", ...}}], "calibration": {"p_idle_w", "p_busy_w",
    "p_load_w"}, "meter_clock_offset": 0.0}``
    """
    try:
        doc = json.loads(text)
        wl = dict(doc.get("workload", {}))
        if isinstance(wl.get("epoch_duration"), list):
            wl["epoch_duration"] = tuple(wl["epoch_duration"])
        workload = WorkloadSpec(**wl)
        samplers = tuple(
            SamplerSpec(s.get("name", f"sampler{i}"), float(s.get("nominal_rate", 10.0)),
                        _pathology_from(s.get("pathology")))
            for i, s in enumerate(doc.get("samplers", [{"name": "smi"}]))
        )
        cal = doc.get("calibration")
        profile = None
        if cal is not None:
            profile = CalibrationProfile(float(cal["p_idle_w"]), float(cal["p_busy_w"]),
                                         None if cal.get("p_load_w") is None else float(cal["p_load_w"]))
        offset = float(doc.get("meter_clock_offset", 0.0))
    except (json.JSONDecodeError, TypeError, KeyError, ValueError) as exc:
        raise DataFormatError(f"invalid synth spec: {exc}") from None
    return workload, samplers, profile, offset
