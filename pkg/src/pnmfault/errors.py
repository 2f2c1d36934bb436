"""Exception hierarchy.

``DataError`` subclasses map to CLI exit code 3, ``ConfigError`` to exit code 2.
"""

from __future__ import annotations


class PnmError(Exception):
    """Base class for every error raised by the toolkit."""

    code = "PnmError"


class ConfigError(PnmError, ValueError):
    code = "ConfigError"


class ConfigInvalid(ConfigError):
    code = "ConfigInvalid"


class DataError(PnmError):
    code = "DataError"


class MissingColumn(DataError):
    code = "MissingColumn"

    def __init__(self, name: str, path: str | None = None):
        self.name = name
        where = f" in {path}" if path else ""
        super().__init__(f"missing column {name!r}{where}")


class EmptyFile(DataError):
    code = "EmptyFile"


class NoTickets(DataError):
    code = "NoTickets"


class DegenerateFeature(DataError):
    code = "DegenerateFeature"


class MissingFeature(DataError):
    code = "MissingFeature"


class NoFeasibleParams(DataError):
    code = "NoFeasibleParams"


class InsufficientOverlap(DataError):
    code = "InsufficientOverlap"


class NoMaintenanceTickets(DataError):
    code = "NoMaintenanceTickets"


class MissingMtr(DataError):
    code = "MissingMtr"


class MismatchedDevices(DataError, ValueError):
    code = "MismatchedDevices"


class ZeroDuration(DataError):
    code = "ZeroDuration"
