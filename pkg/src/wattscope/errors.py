"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
2 for domain inconsistencies, 64 for usage errors, 65 for malformed data.
"""

from __future__ import annotations


class WattscopeError(Exception):
    exit_code = 1


class DomainError(WattscopeError):
    """Inputs are well formed but physically or logically inconsistent."""

    exit_code = 2


class UsageError(WattscopeError):
    exit_code = 64


class DataFormatError(WattscopeError):
    exit_code = 65


class ParseError(DataFormatError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None, raw: str | None = None):
        self.line = line
        self.path = path
        self.raw = raw
        self.message = message
        super().__init__(self._format())

    def _format(self) -> str:
        where = ""
        if self.path is not None:
            where = f"{self.path}:"
        if self.line is not None:
            where += f"{self.line}:"
        return f"{where} {self.message}".strip() if where else self.message

    def with_path(self, path: str) -> "ParseError":
        self.path = path
        self.args = (self._format(),)
        return self


class OrderingError(ParseError):
    pass


class ValidationError(ParseError):
    pass


class InvalidWindowError(DomainError):
    def __init__(self, t0: float, t1: float):
        self.t0, self.t1 = t0, t1
        super().__init__(f"invalid window [{t0}, {t1}]: start must precede end")


class NoSamplesInWindowError(DomainError):
    def __init__(self, t0: float, t1: float, needed: int = 1):
        self.t0, self.t1 = t0, t1
        super().__init__(f"no samples in window [{t0}, {t1}] (need at least {needed})")


class InsufficientDataError(DomainError):
    pass


class UnreliableCounterError(DomainError):
    pass


class CalibrationError(DomainError):
    pass


class UndefinedCorrelationError(DomainError):
    pass


class NoMarkerError(DomainError):
    pass


class PowercapPermissionError(WattscopeError):
    exit_code = 2
