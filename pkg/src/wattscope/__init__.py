"""Quality assessment of energy measurements from neural-network training runs."""

from wattscope.core import (
    EnergyCounterTrace,
    EnergyQuantity,
    PowerSample,
    PowerTrace,
    SessionLog,
    counter_delta,
    integrate_power,
    mean_power,
)
from wattscope.errors import WattscopeError

__version__ = "0.1.0"

__all__ = [
    "EnergyCounterTrace",
    "EnergyQuantity",
    "PowerSample",
    "PowerTrace",
    "SessionLog",
    "WattscopeError",
    "counter_delta",
    "integrate_power",
    "mean_power",
]
