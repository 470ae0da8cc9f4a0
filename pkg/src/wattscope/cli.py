"""``wattscope`` command-line entry point.

Exit codes: 0 success, 2 domain inconsistency, 64 usage, 65 malformed data.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import signal
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from wattscope import __version__
from wattscope.analysis import (
    UndersamplePolicy,
    compare_sources,
    corrected_view,
    epoch_energy_table,
    flagged_fraction,
    full_training_totals,
    reference_gpu_energy,
    sample_energy_correlation,
)
from wattscope.calibrate import DEFAULT_TRANSIENT_S, CalibrationProfile, CalibrationRun, build_profile
from wattscope.core import CounterDomain, EnergyCounterTrace, EnergyQuantity, PowerTrace, SessionLog, counter_delta, integrate_power
from wattscope.errors import (
    DataFormatError,
    DomainError,
    InsufficientDataError,
    ParseError,
    UndefinedCorrelationError,
    UsageError,
    ValidationError,
    WattscopeError,
)
from wattscope.ingest import (
    CodeCarbonRow,
    align,
    codecarbon_window,
    parse_codecarbon_log,
    parse_gpu_sampler,
    parse_meter_csv,
    parse_rapl_log,
    parse_session_log,
)
from wattscope.report import (
    HolisticInputs,
    bounded_holistic_energy,
    codecarbon_estimate,
    co2eq,
    deviation,
    deviation_summary,
    emit_plot_data,
    render_document,
    render_session_report,
)
from wattscope.stats import ecdf_gaps
from wattscope.util import atomic_write

log = logging.getLogger("wattscope")

EXIT_OK = 0
EXIT_DOMAIN = 2
EXIT_USAGE = 64
EXIT_DATA = 65

OUT_ENV = "WATTSCOPE_OUT"
REFERENCE = "meter"
CODECARBON = "codecarbon"

# Every numeric policy default in one place. --paper-defaults re-applies the
# replication values on top of any --config file.
DEFAULTS: dict[str, Any] = {
    "policy": "absolute:10",
    "alpha": 0.05,
    "gap_width": 10.0,
    "rate": 10.0,
    "pue": 1.0,
    "intensity": None,
    "jobs": 1,
    "meter_offset": 0.0,
}
PAPER_DEFAULTS: dict[str, Any] = {
    "policy": "absolute:10",
    "alpha": 0.05,
    "gap_width": 10.0,
    "rate": 10.0,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2, which means a domain error here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- settings -------------------------------------------------------------------

def resolve_settings(args: argparse.Namespace) -> dict[str, Any]:
    """Builtin defaults, then ``--config``, then ``--paper-defaults``, then explicit flags."""
    s = dict(DEFAULTS)
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        path = _existing(cfg_path, "config file")
        try:
            cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise DataFormatError(f"{path}: config must be a JSON object")
        unknown = set(cfg) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"{path}: unknown config keys {sorted(unknown)}")
        s.update(cfg)
    if getattr(args, "paper_defaults", False):
        s.update(PAPER_DEFAULTS)
    for key in DEFAULTS:
        v = getattr(args, key, None)
        if v is not None:
            s[key] = v
    _check_settings(s)
    return s


def _check_settings(s: dict[str, Any]) -> None:
    s["policy"] = UndersamplePolicy.parse(str(s["policy"]))
    checks: list[tuple[str, Callable[[Any], bool], str]] = [
        ("alpha", lambda v: 0 < v < 1, "in (0, 1)"),
        ("gap_width", lambda v: v > 0, "> 0"),
        ("rate", lambda v: v > 0, "> 0"),
        ("pue", lambda v: v >= 1, ">= 1"),
        ("jobs", lambda v: int(v) == v and v >= 1, "an integer >= 1"),
        ("meter_offset", lambda v: True, "a number"),
    ]
    for key, ok, what in checks:
        try:
            v = float(s[key])
        except (TypeError, ValueError):
            raise UsageError(f"{key} must be a number, got {s[key]!r}") from None
        if not ok(v):
            raise UsageError(f"{key} must be {what}, got {s[key]!r}")
        s[key] = int(v) if key == "jobs" else v
    if s["intensity"] is not None:
        try:
            s["intensity"] = float(s["intensity"])
        except (TypeError, ValueError):
            raise UsageError(f"intensity must be a number, got {s['intensity']!r}") from None
        if s["intensity"] < 0:
            raise UsageError("intensity must be >= 0 g/kWh")


def _existing(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def _out_dir(args: argparse.Namespace, fallback: Path) -> Path:
    out = args.out or os.environ.get(OUT_ENV) or fallback
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- session directories ----------------------------------------------------------

_GPU_FILE = re.compile(r"^gpu_(\d+)\.csv$")


@dataclass
class SessionDir:
    path: Path
    session: SessionLog | None = None
    meter: PowerTrace | None = None
    gpus: dict[str, PowerTrace | list[PowerTrace]] = field(default_factory=dict)
    rapl: dict[CounterDomain, EnergyCounterTrace] = field(default_factory=dict)
    codecarbon: list[CodeCarbonRow] | None = None
    analytic: dict | None = None


def _read(path: Path, parse: Callable[[str], Any]) -> Any:
    try:
        return parse(path.read_text(encoding="utf-8"))
    except ParseError as exc:
        raise exc.with_path(str(path)) from None
    except DataFormatError as exc:
        raise DataFormatError(f"{path}: {exc}") from None
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"{path}: not UTF-8 text ({exc})") from None


SESSION_FILES = {"session": "session.csv", "meter": "meter.csv", "rapl": "rapl.csv", "codecarbon": "codecarbon.csv"}


def load_session_dir(path: str | Path, meter_offset: float = 0.0, need_session: bool = True,
                     overrides: dict[str, Any] | None = None) -> SessionDir:
    """Discover and parse the conventional files of a session directory.

    ``overrides`` maps ``session``/``meter``/``rapl``/``codecarbon`` to explicit
    paths and ``gpu`` to a list of GPU files replacing ``gpu_<i>.csv`` discovery.
    """
    root = _existing(path, "session directory")
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    overrides = {k: v for k, v in (overrides or {}).items() if v}
    sd = SessionDir(root)

    def locate(key: str) -> Path | None:
        if key in overrides:
            return _existing(overrides[key], f"{key} file")
        f = root / SESSION_FILES[key]
        return f if f.exists() else None

    f = locate("session")
    if f is not None:
        sd.session = _read(f, parse_session_log)
    elif need_session:
        raise UsageError(f"{root} has no session.csv")
    f = locate("meter")
    if f is not None:
        sd.meter = align(_read(f, parse_meter_csv), meter_offset, REFERENCE)
    f = locate("rapl")
    if f is not None:
        sd.rapl = _read(f, parse_rapl_log)
    f = locate("codecarbon")
    if f is not None:
        sd.codecarbon = _read(f, parse_codecarbon_log)
    f = root / "analytic.json"
    if f.exists():
        try:
            sd.analytic = json.loads(f.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{f}: invalid JSON: {exc}") from None

    if "gpu" in overrides:
        files = [(i, _existing(p, "GPU file")) for i, p in enumerate(overrides["gpu"])]
    else:
        files = sorted(
            ((int(m.group(1)), p) for p in root.iterdir() if (m := _GPU_FILE.match(p.name))),
            key=lambda ip: ip[0],
        )
    groups: dict[str, dict[str, PowerTrace]] = {}
    for i, p in files:
        parsed = _read(p, lambda text, i=i: parse_gpu_sampler(text, f"gpu_{i}"))
        source = parsed.trace.source_id
        gpu_index = parsed.meta.get("gpu_index", str(i))
        if gpu_index in groups.setdefault(source, {}):
            raise ValidationError(f"source {source!r} has two files for GPU {gpu_index}", path=str(p))
        groups[source][gpu_index] = parsed.trace
    for source in sorted(groups):
        traces = [groups[source][k] for k in sorted(groups[source], key=_index_key)]
        sd.gpus[source] = traces[0] if len(traces) == 1 else traces
    return sd


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    return {"session": args.session_log, "meter": args.meter, "rapl": args.rapl,
            "codecarbon": args.codecarbon, "gpu": args.gpu}


def _index_key(k: str) -> tuple[int, str]:
    return (int(k), "") if k.isdigit() else (sys.maxsize, k)


def _profile(args: argparse.Namespace, root: Path) -> CalibrationProfile | None:
    if args.profile:
        p = _existing(args.profile, "calibration profile")
        return _read(p, CalibrationProfile.from_text)
    default = root / "calibration.txt"
    if default.exists():
        return _read(default, CalibrationProfile.from_text)
    return None


def _span(session: SessionLog) -> tuple[float, float]:
    if not session.epochs:
        raise InsufficientDataError("session has no epochs")
    return session.epochs[0][0], session.epochs[-1][1]


# -- calibrate -------------------------------------------------------------------

def _calibration_run(path: str, meter_offset: float) -> CalibrationRun:
    sd = load_session_dir(path, meter_offset, need_session=False)
    if sd.meter is None:
        raise UsageError(f"{sd.path} has no meter.csv")
    missing = [d.value for d in CounterDomain if d not in sd.rapl]
    if missing:
        raise UsageError(f"{sd.path}: rapl.csv lacks {missing}")
    gpus: list[PowerTrace] = []
    for src in sd.gpus.values():
        gpus.extend([src] if isinstance(src, PowerTrace) else src)
        break  # one source is enough: several sources of one GPU would double count
    return CalibrationRun(sd.meter, sd.rapl[CounterDomain.CPU_PACKAGE], sd.rapl[CounterDomain.DRAM], tuple(gpus))


def cmd_calibrate(args: argparse.Namespace) -> int:
    s = resolve_settings(args)
    idle = _calibration_run(args.idle, s["meter_offset"])
    busy = _calibration_run(args.busy, s["meter_offset"])
    load = _calibration_run(args.load, s["meter_offset"]) if args.load else None
    profile = build_profile(idle, busy, load, args.transient)
    out = Path(args.out or Path(os.environ.get(OUT_ENV, ".")) / "calibration.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(out, profile.to_text())
    print(f"p_idle_w={profile.p_idle_off_socket:.6f}")
    print(f"p_busy_w={profile.p_busy_off_socket:.6f}")
    if profile.p_load_estimate is not None:
        print(f"p_load_w={profile.p_load_estimate:.6f}")
    print(f"wrote {out}")
    return EXIT_OK


# -- validate --------------------------------------------------------------------

def _safe(fn: Callable[[], Any]) -> Any:
    """Run a statistic; undefined results become a reason string instead of failing the report."""
    try:
        return fn()
    except (UndefinedCorrelationError, InsufficientDataError) as exc:
        return {"undefined": str(exc)}


def _codecarbon_cells(rows: list[CodeCarbonRow], session: SessionLog) -> list[EnergyQuantity | None]:
    out: list[EnergyQuantity | None] = []
    for s, e in session.epochs:
        try:
            out.append(EnergyQuantity(codecarbon_window(rows, s, e).gpu_energy))
        except DomainError:
            out.append(None)
    return out


def _source_report(table, source: str, reference: str | None, policy: UndersamplePolicy,
                   alpha: float, sampled: bool) -> dict:
    rep: dict[str, Any] = {}
    if sampled:
        kept = corrected_view(table, source, policy)
        rep["flagged_fraction"] = flagged_fraction(table, source, policy)
        rep["flagged_epochs"] = [r.epoch_idx for r in table if r.epoch_idx not in {k.epoch_idx for k in kept}]
        rep["sample_energy_correlation"] = {
            "raw": _safe(lambda: sample_energy_correlation(table, source)),
            "corrected": _safe(lambda: sample_energy_correlation(kept, source)),
        }
    if reference is None:
        return rep
    views = {"raw": table}
    if sampled:
        views["corrected"] = kept
    for view, rows in views.items():
        rep[view] = {
            basis: _safe(lambda rows=rows, basis=basis: compare_sources(rows, source, reference, alpha, basis).as_dict())
            for basis in ("energy", "mean_power")
        }
    totals = {v: full_training_totals(rows) for v, rows in views.items()}
    rep["full_training_j"] = {
        v: {"source": t.get(source), "reference": t.get(reference)} for v, t in totals.items()
    }
    return rep


def _epoch_rows(table) -> list[dict]:
    return [
        {
            "end_s": r.end,
            "energy_j": {k: (None if v is None else v.joules) for k, v in r.energy.items()},
            "epoch_idx": r.epoch_idx,
            "expected_samples": r.expected_samples,
            "sample_count": r.sample_count,
            "start_s": r.start,
            "undersampled": r.undersampled,
        }
        for r in table
    ]


def cmd_validate(args: argparse.Namespace) -> int:
    s = resolve_settings(args)
    sd = load_session_dir(args.session, s["meter_offset"], overrides=_overrides(args))
    out = _out_dir(args, sd.path)
    profile = _profile(args, sd.path)
    policy: UndersamplePolicy = s["policy"]
    warnings: list[str] = []

    derived: dict[str, list[EnergyQuantity | None]] = {}
    reference: str | None = None
    if sd.meter is None:
        warnings.append("no meter.csv: no reference, correlations skipped")
    elif profile is None:
        warnings.append("no calibration profile: meter cannot be turned into a GPU reference")
    elif not all(d in sd.rapl for d in CounterDomain):
        warnings.append("rapl.csv missing or incomplete: meter cannot be turned into a GPU reference")
    else:
        # the load estimate, when calibrated, is closer to the true draw than the busy level
        cells = reference_gpu_energy(
            sd.session, sd.meter, sd.rapl[CounterDomain.CPU_PACKAGE], sd.rapl[CounterDomain.DRAM], profile,
            profile.p_load_estimate, strict=False)
        dropped = sum(c is None for c in cells)
        if dropped:
            warnings.append(f"{dropped} epochs lack a meter-derived reference "
                            "(no meter samples or GPU power below the clamp)")
        derived[REFERENCE] = cells
        reference = REFERENCE
    if sd.codecarbon is not None:
        derived[CODECARBON] = _codecarbon_cells(sd.codecarbon, sd.session)
    if not sd.gpus:
        warnings.append("no gpu_<i>.csv files")
    for w in warnings:
        log.warning(w)

    table = epoch_energy_table(sd.session, sd.gpus, policy, derived)
    sources = [(name, True) for name in sd.gpus] + ([(CODECARBON, False)] if CODECARBON in derived else [])
    with ThreadPoolExecutor(max_workers=s["jobs"]) as pool:
        reports = list(pool.map(
            lambda ns: _source_report(table, ns[0], reference, policy, s["alpha"], ns[1]), sources))
    correlations = {name: rep for (name, _), rep in zip(sources, reports)}

    names = [n for n, _ in sources] + ([reference] if reference else [])
    epoch_power = {n: [r.mean_power(n) for r in table if r.energy.get(n) is not None] for n in names}
    gaps = {n: [{"high_w": g.high, "low_w": g.low, "width_w": g.width}
                for g in ecdf_gaps(v, s["gap_width"])] for n, v in epoch_power.items()}

    doc = render_session_report({
        "session": {"epochs": len(sd.session.epochs), "gpu_sources": sorted(sd.gpus),
                    "session_id": sd.session.session_id, "memory_gb": sd.session.memory_gb},
        "calibration": None if profile is None else {
            "p_busy_w": profile.p_busy_off_socket, "p_idle_w": profile.p_idle_off_socket,
            "p_load_w": profile.p_load_estimate},
        "epoch_table": _epoch_rows(table),
        "correlations": correlations,
        "ecdf_gaps": gaps,
        "reference": reference,
        "settings": {"alpha": s["alpha"], "gap_width_w": s["gap_width"], "policy": str(policy)},
        "warnings": warnings,
    })
    atomic_write(out / "validation.json", doc)
    atomic_write(out / "ecdf.csv", emit_plot_data("ecdf", epoch_power))
    atomic_write(out / "boxplot.csv", emit_plot_data("boxplot", epoch_power))
    if reference is not None:
        scatter = {}
        for name, sampled in sources:
            rows = [r for r in table if r.energy.get(name) is not None and r.energy.get(reference) is not None]
            scatter[name] = ([r.energy[reference].joules for r in rows], [r.energy[name].joules for r in rows],
                             [r.sample_count.get(name) for r in rows])
            ts = {"t": [r.start for r in table],
                  "reference": [r.mean_power(reference) for r in table],
                  "estimate": [r.mean_power(name) for r in table]}
            atomic_write(out / f"timeseries_diff_{name}.csv", emit_plot_data("timeseries_diff", ts))
        atomic_write(out / "scatter.csv", emit_plot_data("scatter", scatter))

    for name, rep in correlations.items():
        if reference is None:
            print(f"{name}: flagged {rep.get('flagged_fraction', 0.0):.3f} of epochs (no reference)")
            continue
        line = f"{name}: pearson raw={_fmt_stat(rep['raw']['energy'])}"
        if "corrected" in rep:
            line += f" corrected={_fmt_stat(rep['corrected']['energy'])}"
            line += f" flagged={rep['flagged_fraction']:.3f}"
        ks = rep["raw"]["energy"]
        if "ks_reject_at_alpha" in ks:
            line += f" ks_reject={ks['ks_reject_at_alpha']}"
        print(line)
    print(f"wrote {out / 'validation.json'}")
    return EXIT_OK


def _fmt_stat(d: dict) -> str:
    return f"{d['pearson']:.4f}" if "pearson" in d else "undefined"


# -- report ----------------------------------------------------------------------

def _pick_gpu(sd: SessionDir, name: str | None) -> tuple[str, PowerTrace | list[PowerTrace]]:
    if not sd.gpus:
        raise UsageError(f"{sd.path} has no gpu_<i>.csv files")
    if name is None:
        name = next(iter(sd.gpus))
    if name not in sd.gpus:
        raise UsageError(f"no GPU source {name!r}; have {sorted(sd.gpus)}")
    return name, sd.gpus[name]


def _gpu_energy(src: PowerTrace | list[PowerTrace], t0: float, t1: float) -> EnergyQuantity:
    traces = [src] if isinstance(src, PowerTrace) else src
    return EnergyQuantity(sum(integrate_power(g, t0, t1).joules for g in traces))


def _estimates(sd: SessionDir, gpu, profile: CalibrationProfile, pue: float, intensity: float,
               t0: float, t1: float):
    e_gpu = _gpu_energy(gpu, t0, t1)
    if CounterDomain.CPU_PACKAGE not in sd.rapl:
        raise UsageError(f"{sd.path}: no cpu_package counters in rapl.csv")
    e_cpu = counter_delta(sd.rapl[CounterDomain.CPU_PACKAGE], t0, t1)
    e_mem = counter_delta(sd.rapl[CounterDomain.DRAM], t0, t1) if CounterDomain.DRAM in sd.rapl else None
    duration = t1 - t0
    cc = codecarbon_estimate(HolisticInputs(e_gpu, e_cpu, sd.session.memory_gb, duration, pue), intensity)
    bounds = bounded_holistic_energy(e_gpu, e_cpu, e_mem, duration, profile, pue, sd.session.memory_gb, intensity)
    return cc, bounds


def cmd_report(args: argparse.Namespace) -> int:
    s = resolve_settings(args)
    if s["intensity"] is None:
        raise UsageError("carbon intensity is required: pass --intensity or set it in --config")
    sd = load_session_dir(args.session, s["meter_offset"], overrides=_overrides(args))
    out = _out_dir(args, sd.path)
    profile = _profile(args, sd.path)
    if profile is None:
        raise UsageError("no calibration profile: pass --profile or add calibration.txt to the session")
    name, gpu = _pick_gpu(sd, args.gpu_source)
    pue, intensity = s["pue"], s["intensity"]
    t0, t1 = _span(sd.session)
    cc, bounds = _estimates(sd, gpu, profile, pue, intensity, t0, t1)

    doc: dict[str, Any] = {
        "session": {"duration_s": t1 - t0, "epochs": len(sd.session.epochs), "gpu_source": name,
                    "memory_gb": sd.session.memory_gb, "session_id": sd.session.session_id},
        "calibration": {"p_busy_w": profile.p_busy_off_socket, "p_idle_w": profile.p_idle_off_socket,
                        "p_load_w": profile.p_load_estimate},
        "holistic": {"calibrated": bounds.as_dict(), "codecarbon_model": cc.as_dict()},
        "settings": {"intensity_g_per_kwh": intensity, "pue": pue},
    }
    warnings: list[str] = []
    if bounds.degraded:
        warnings.append("no DRAM counters: memory energy uses the 3 W per 8 GB assumption")

    if sd.meter is not None:
        ref = EnergyQuantity(integrate_power(sd.meter, t0, t1).joules * pue)
        per_cc, per_lo, per_pt, per_hi = [], [], [], []
        for e0, e1 in sd.session.epochs:
            try:
                r = EnergyQuantity(integrate_power(sd.meter, e0, e1).joules * pue)
                c, b = _estimates(sd, gpu, profile, pue, intensity, e0, e1)
            except DomainError:
                continue
            per_cc.append(deviation(c.point, r))
            per_lo.append(deviation(b.lower, r))
            per_pt.append(deviation(b.point, r))
            per_hi.append(deviation(b.upper, r))
        doc["reference"] = {
            "co2eq_g": co2eq(ref, intensity),
            "meter_j": ref.joules,
            "contained": bounds.lower.joules <= ref.joules <= bounds.upper.joules,
            "deviation_pct": {"calibrated_lower": deviation(bounds.lower, ref),
                              "calibrated_point": deviation(bounds.point, ref),
                              "calibrated_upper": deviation(bounds.upper, ref),
                              "codecarbon_model": deviation(cc.point, ref)},
            "per_epoch_deviation_pct": {"calibrated_lower": deviation_summary(per_lo),
                                        "calibrated_point": deviation_summary(per_pt),
                                        "calibrated_upper": deviation_summary(per_hi),
                                        "codecarbon_model": deviation_summary(per_cc)},
        }
    else:
        warnings.append("no meter.csv: deviations against the meter are not available")
    if sd.analytic is not None:
        truth = float(sd.analytic["total"]["node_j"]) * pue
        doc["analytic"] = {"node_j": truth,
                           "contained": bounds.lower.joules <= truth <= bounds.upper.joules}
    doc["warnings"] = warnings
    for w in warnings:
        log.warning(w)

    atomic_write(out / "holistic.json", render_document(doc))
    print(f"codecarbon model: {cc.point.wh:.3f} Wh, {cc.co2eq_g:.3f} g CO2eq")
    print(f"calibrated: [{bounds.lower.wh:.3f}, {bounds.upper.wh:.3f}] Wh, point {bounds.point.wh:.3f} Wh, "
          f"{bounds.co2eq_g:.3f} g CO2eq")
    if "reference" in doc:
        dev = doc["reference"]["deviation_pct"]
        print(f"deviation vs meter: codecarbon {dev['codecarbon_model']:+.2f}%, "
              f"bounds {dev['calibrated_lower']:+.2f}% .. {dev['calibrated_upper']:+.2f}%")
    print(f"wrote {out / 'holistic.json'}")
    return EXIT_OK


# -- synth / collect -------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    from wattscope.synth import generate_session, load_synth_spec, write_session

    spec = _existing(args.spec, "synth spec")
    workload, samplers, profile, offset = _read(spec, load_synth_spec)
    if args.seed is not None:
        from dataclasses import replace

        workload = replace(workload, seed=args.seed)
    out = _out_dir(args, Path(workload.session_id))
    sess = generate_session(workload, samplers, profile, offset)
    write_session(sess, out)
    print(f"wrote synthetic session {workload.session_id!r} ({workload.epoch_count} epochs) to {out}")
    return EXIT_OK


def cmd_collect(args: argparse.Namespace) -> int:
    from wattscope.collector import CollectorConfig, run_collector

    s = resolve_settings(args)
    out = _out_dir(args, Path("."))
    try:
        config = CollectorConfig(s["rate"], args.duration, args.powercap_root, args.gpu_command, str(out),
                                 args.gpu_backend, args.gpu_count)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    stop = threading.Event()
    previous = None
    if threading.current_thread() is threading.main_thread():
        previous = signal.signal(signal.SIGINT, lambda *_: stop.set())
    try:
        result = run_collector(config, stop=stop)
    finally:
        if previous is not None:
            signal.signal(signal.SIGINT, previous)
    print(f"collected {result.gpu_samples} GPU and {result.rapl_samples} RAPL samples in {result.elapsed:.3f} s")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def _policy_flags(p: argparse.ArgumentParser, report: bool = False) -> None:
    p.add_argument("--config", help="JSON file with policy defaults")
    p.add_argument("--paper-defaults", action="store_true",
                   help="k=10, alpha=0.05, gap 10 W, rate 10 Hz (overrides --config)")
    p.add_argument("--meter-offset", type=float, help="seconds added to meter timestamps")
    p.add_argument("--profile", help="calibration profile (default: <session>/calibration.txt)")
    p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or the session directory)")
    p.add_argument("--session-log", help="epoch log (default: <session>/session.csv)")
    p.add_argument("--meter", help="meter log (default: <session>/meter.csv)")
    p.add_argument("--rapl", help="RAPL counter log (default: <session>/rapl.csv)")
    p.add_argument("--codecarbon", help="Code Carbon log (default: <session>/codecarbon.csv)")
    p.add_argument("--gpu", action="append", help="GPU sampler file, repeatable (default: <session>/gpu_<i>.csv)")
    if report:
        p.add_argument("--pue", type=float, help="power usage effectiveness, >= 1 (default 1)")
        p.add_argument("--intensity", type=float, help="grid carbon intensity in g CO2eq/kWh (required)")
        p.add_argument("--gpu-source", help="GPU source name to use (default: first discovered)")
    else:
        p.add_argument("--policy", help="undersampling policy, absolute:<k> or ratio:<r>")
        p.add_argument("--alpha", type=float, help="KS significance level")
        p.add_argument("--gap-width", type=float, help="minimum eCDF gap width in W")
        p.add_argument("--jobs", type=int, help="worker threads for per-source statistics")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wattscope", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("calibrate", help="derive idle/busy off-socket offsets")
    p.add_argument("--idle", required=True, help="directory of the idle run (meter.csv, rapl.csv, gpu_<i>.csv)")
    p.add_argument("--busy", required=True, help="directory of the busy run")
    p.add_argument("--load", help="directory of an optional representative-load run")
    p.add_argument("--transient", type=float, default=DEFAULT_TRANSIENT_S,
                   help="seconds trimmed from each end of a run")
    p.add_argument("--meter-offset", type=float, help="seconds added to meter timestamps")
    p.add_argument("--config", help="JSON file with defaults")
    p.add_argument("--out", help=f"profile path (default: ${OUT_ENV}/calibration.txt or ./calibration.txt)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("validate", aliases=["analyze"], help="per-epoch tables, correlations and plot data")
    p.add_argument("session", help="session directory")
    _policy_flags(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("report", help="holistic energy and CO2eq estimate")
    p.add_argument("session", help="session directory")
    _policy_flags(p, report=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="write a synthetic session directory from a JSON spec")
    p.add_argument("spec", help="JSON synth spec")
    p.add_argument("--seed", type=int, help="override the workload seed")
    p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./<session_id>)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("collect", help="sample powercap counters and GPU power on this node")
    p.add_argument("--rate", type=float, help="samples per second (default 10)")
    p.add_argument("--duration", type=float, help="seconds to sample; omit to run until interrupted")
    p.add_argument("--powercap-root", default="/sys/class/powercap", help="power cap interface root")
    p.add_argument("--gpu-command", default="nvidia-smi --query-gpu=power.draw --format=csv,noheader",
                   help="command printing one '<watts> W' line per GPU")
    p.add_argument("--gpu-backend", choices=("exec", "stream"), default="exec",
                   help="exec: run the command per sample; stream: one long-running process, e.g. with -lms 100")
    p.add_argument("--gpu-count", type=int, default=1, help="lines per refresh for the stream backend")
    p.add_argument("--config", help="JSON file with defaults")
    p.add_argument("--paper-defaults", action="store_true", help="sample at 10 Hz unless --rate is given")
    p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or .)")
    p.set_defaults(func=cmd_collect)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.ERROR if args.quiet else (logging.DEBUG if args.verbose > 1 else
                                              logging.INFO if args.verbose else logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except WattscopeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
