"""Holistic energy estimates, CO2eq, and machine-readable report output."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Mapping, Sequence

import numpy as np

from wattscope.calibrate import CalibrationProfile
from wattscope.core import EnergyQuantity
from wattscope.errors import DomainError
from wattscope.stats import ecdf

SCHEMA = "wattscope/1"

# Memory draw assumed by the Code Carbon model.
WATTS_PER_8GB = 3.0

# Documented reference values; never applied implicitly.
INDUSTRY_PUE = 1.58
EXAMPLE_INTENSITY_G_PER_KWH = 381.0


class Method(str, Enum):
    CODECARBON_MODEL = "codecarbon_model"
    CALIBRATED_BOUNDS = "calibrated_bounds"
    CALIBRATED_WITH_LOAD_ESTIMATE = "calibrated_with_load_estimate"


def memory_power_estimate(memory_gb: float) -> float:
    if memory_gb < 0:
        raise ValueError("memory size must be non-negative")
    return memory_gb / 8.0 * WATTS_PER_8GB


@dataclass(frozen=True)
class HolisticInputs:
    e_gpu: EnergyQuantity
    e_cpu: EnergyQuantity
    memory_gb: float
    duration: float
    pue: float = 1.0
    e_mem_measured: EnergyQuantity | None = None

    def __post_init__(self) -> None:
        if not self.pue >= 1.0:
            raise ValueError(f"PUE must be >= 1, got {self.pue}")
        if not self.duration > 0:
            raise ValueError(f"duration must be > 0, got {self.duration}")


@dataclass(frozen=True)
class HolisticEstimate:
    lower: EnergyQuantity
    point: EnergyQuantity
    upper: EnergyQuantity
    method: Method
    intensity_g_per_kwh: float | None = None
    degraded: bool = False

    def __post_init__(self) -> None:
        # Relative slack only for rounding in the point/bound sums.
        slack = 1e-12 * max(self.upper.joules, 1.0)
        if not (self.lower.joules <= self.point.joules + slack and self.point.joules <= self.upper.joules + slack):
            raise ValueError("holistic estimate must satisfy lower <= point <= upper")

    @property
    def co2eq_g(self) -> float | None:
        if self.intensity_g_per_kwh is None:
            return None
        return co2eq(self.point, self.intensity_g_per_kwh)

    def as_dict(self) -> dict:
        return {
            "co2eq_g": self.co2eq_g,
            "degraded": self.degraded,
            "intensity_g_per_kwh": self.intensity_g_per_kwh,
            "lower_j": self.lower.joules,
            "lower_wh": self.lower.wh,
            "method": self.method.value,
            "point_j": self.point.joules,
            "point_wh": self.point.wh,
            "upper_j": self.upper.joules,
            "upper_wh": self.upper.wh,
        }


def codecarbon_energy(inputs: HolisticInputs, apply_pue: bool = True) -> EnergyQuantity:
    """GPU + CPU + assumed memory energy, scaled by PUE unless ``apply_pue`` is off."""
    mem = memory_power_estimate(inputs.memory_gb) * inputs.duration
    it = inputs.e_gpu.joules + inputs.e_cpu.joules + mem
    return EnergyQuantity(it * (inputs.pue if apply_pue else 1.0))


def bounded_holistic_energy(
    e_gpu: EnergyQuantity,
    e_cpu: EnergyQuantity,
    e_mem_measured: EnergyQuantity | None,
    duration: float,
    profile: CalibrationProfile,
    pue: float = 1.0,
    memory_gb: float | None = None,
    intensity_g_per_kwh: float | None = None,
) -> HolisticEstimate:
    """Node energy bracketed by the idle and busy off-socket levels.

    Without a measured memory energy the Code Carbon memory assumption is
    used instead (needs ``memory_gb``) and the estimate is marked degraded.
    """
    if not pue >= 1.0:
        raise ValueError(f"PUE must be >= 1, got {pue}")
    degraded = e_mem_measured is None
    if degraded:
        if memory_gb is None:
            raise DomainError("no measured memory energy and no memory size to fall back on")
        mem_j = memory_power_estimate(memory_gb) * duration
    else:
        mem_j = e_mem_measured.joules
    base = e_gpu.joules + e_cpu.joules + mem_j

    def total(off_socket_w: float) -> EnergyQuantity:
        return EnergyQuantity((base + off_socket_w * duration) * pue)

    lower = total(profile.p_idle_off_socket)
    upper = total(profile.p_busy_off_socket)
    if profile.p_load_estimate is not None:
        point = total(profile.p_load_estimate)
        method = Method.CALIBRATED_WITH_LOAD_ESTIMATE
    else:
        point = total((profile.p_idle_off_socket + profile.p_busy_off_socket) / 2.0)
        method = Method.CALIBRATED_BOUNDS
    return HolisticEstimate(lower, point, upper, method, intensity_g_per_kwh, degraded)


def codecarbon_estimate(inputs: HolisticInputs, intensity_g_per_kwh: float | None = None) -> HolisticEstimate:
    e = codecarbon_energy(inputs)
    return HolisticEstimate(e, e, e, Method.CODECARBON_MODEL, intensity_g_per_kwh)


def co2eq(energy: EnergyQuantity, intensity_g_per_kwh: float) -> float:
    """Grams of CO2-equivalent for ``energy`` at a grid intensity in g/kWh."""
    if intensity_g_per_kwh < 0:
        raise ValueError("carbon intensity must be non-negative")
    return energy.kwh * intensity_g_per_kwh


def deviation(estimate: EnergyQuantity | float, reference: EnergyQuantity | float) -> float:
    """Signed percent error of ``estimate``; negative means underestimation."""
    est = estimate.joules if isinstance(estimate, EnergyQuantity) else float(estimate)
    ref = reference.joules if isinstance(reference, EnergyQuantity) else float(reference)
    if ref == 0:
        raise DomainError("deviation undefined against a zero reference")
    return (est - ref) / ref * 100.0


def deviation_summary(deviations: Sequence[float]) -> dict:
    """Median and largest-magnitude deviation (sign kept) of a series."""
    d = np.asarray(deviations, dtype=float)
    if d.size == 0:
        return {"max_abs": None, "median": None, "n": 0, "worst": None}
    worst = float(d[np.argmax(np.abs(d))])
    return {"max_abs": abs(worst), "median": float(np.median(d)), "n": int(d.size), "worst": worst}


# -- output -------------------------------------------------------------------

def _clean(obj: Any) -> Any:
    if isinstance(obj, Mapping):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, EnergyQuantity):
        return obj.joules
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def render_document(doc: Mapping[str, Any]) -> str:
    """Versioned JSON with sorted keys; equal inputs give equal bytes."""
    return json.dumps(_clean({"schema": SCHEMA, **doc}), sort_keys=True, indent=2, allow_nan=False) + "\n"


def render_session_report(results: Mapping[str, Any] | None = None) -> str:
    """Session report: epoch table, correlations, calibration and holistic sections."""
    results = dict(results or {})
    doc = {
        "session": results.pop("session", {}),
        "calibration": results.pop("calibration", None),
        "epoch_table": results.pop("epoch_table", []),
        "correlations": results.pop("correlations", {}),
        "holistic": results.pop("holistic", {}),
    }
    doc.update(results)
    return render_document(doc)


def boxplot_stats(values: Sequence[float], whisker: float = 1.5) -> dict:
    """Quartiles by linear interpolation; outliers lie beyond ``whisker`` IQRs."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("boxplot of an empty series")
    q1, med, q3 = (float(np.percentile(v, q, method="linear")) for q in (25, 50, 75))
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - whisker * iqr, q3 + whisker * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    outliers = v[(v < lo_fence) | (v > hi_fence)]
    return {
        "min": float(inside.min()),
        "q1": q1,
        "median": med,
        "q3": q3,
        "max": float(inside.max()),
        "outliers": [float(x) for x in outliers],
    }


PLOT_COLUMNS = {
    "ecdf": ("series", "value", "fraction"),
    "boxplot": ("series", "min", "q1", "median", "q3", "max", "outliers"),
    "scatter": ("series", "x", "y", "size"),
    "timeseries_diff": ("t", "reference", "estimate", "difference"),
}


def _num(v: float | None) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    return repr(float(v))


def emit_plot_data(kind: str, data: Mapping[str, Any]) -> str:
    """Headered CSV for one plot kind.

    ``ecdf``: ``{series: samples}``; ``boxplot``: ``{series: values}``;
    ``scatter``: ``{series: (xs, ys[, sizes])}``; ``timeseries_diff``:
    ``{"t": ..., "reference": ..., "estimate": ...}`` where missing
    estimates are ``None`` and yield empty cells.
    """
    if kind not in PLOT_COLUMNS:
        raise ValueError(f"unknown plot kind {kind!r}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLOT_COLUMNS[kind])
    if kind == "ecdf":
        for name in sorted(data):
            values, frac = ecdf(data[name])
            for v, f in zip(values, frac):
                w.writerow([name, _num(v), _num(f)])
    elif kind == "boxplot":
        for name in sorted(data):
            if len(data[name]) == 0:
                continue
            b = boxplot_stats(data[name])
            w.writerow([name] + [_num(b[k]) for k in ("min", "q1", "median", "q3", "max")]
                       + [";".join(_num(o) for o in b["outliers"])])
    elif kind == "scatter":
        for name in sorted(data):
            cols = data[name]
            xs, ys = cols[0], cols[1]
            sizes = cols[2] if len(cols) > 2 else [None] * len(xs)
            for x, y, s in zip(xs, ys, sizes):
                w.writerow([name, _num(x), _num(y), _num(s)])
    else:
        t, ref, est = data["t"], data["reference"], data["estimate"]
        for ti, r, e in zip(t, ref, est):
            diff = None if (r is None or e is None) else e - r
            w.writerow([_num(ti), _num(r), _num(e), _num(diff)])
    return buf.getvalue()
