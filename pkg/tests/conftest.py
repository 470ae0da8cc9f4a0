import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from wattscope.core import CounterDomain, EnergyCounterTrace, PowerTrace

settings.register_profile("default", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def grid_trace(powers, interval=0.1, start=0.0, source="gpu"):
    """Samples on an exact ``interval`` grid starting at ``start``."""
    powers = np.asarray(powers, dtype=float)
    times = start + np.arange(powers.size) * interval
    return PowerTrace(source, interval, times, powers)


def counter_trace(times, energies_j, wrap=2**32, start=0, domain=CounterDomain.CPU_PACKAGE):
    """Counter readings for cumulative energies (J), wrapped modulo ``wrap``."""
    uj = start + np.rint(np.asarray(energies_j, dtype=float) * 1e6).astype(np.int64)
    return EnergyCounterTrace(domain, wrap, np.asarray(times, dtype=float), uj % wrap)


@pytest.fixture
def grid():
    return grid_trace


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
