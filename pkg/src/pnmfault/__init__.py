"""Fault detection and fault typing for cable-modem PNM telemetry, trained on trouble tickets."""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import ConfigError, DataError, PnmError  # noqa: E402
from .model import AnomalyEvent, DeviceSeries, Interval, PnmRecord, Ticket  # noqa: E402

__all__ = [
    "__version__",
    "AnomalyEvent",
    "ConfigError",
    "DataError",
    "DeviceSeries",
    "Interval",
    "PnmError",
    "PnmRecord",
    "Ticket",
]
