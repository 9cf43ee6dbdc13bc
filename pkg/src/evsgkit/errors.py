"""Exception hierarchy.

Every error belongs to one of three failure classes (config, data, endpoint);
the CLI maps the class to its exit code.
"""

from __future__ import annotations

from typing import Any


class EvsgError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(EvsgError):
    exit_code = 2


class DataError(EvsgError):
    exit_code = 3


class EndpointFailure(EvsgError):
    exit_code = 4


# --- graph -----------------------------------------------------------------


class SpanError(DataError):
    """start >= end, negative start or non-finite bounds."""


class RangeError(DataError):
    """An event span falls outside [0, duration]."""


class StructureError(DataError):
    """Unsorted events, length mismatches, empty groups and similar."""


class GraphParseError(DataError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None,
                 report: Any = None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)
        self.line = line
        self.column = column
        self.report = report


# --- endpoint --------------------------------------------------------------


class TransportError(EndpointFailure):
    """Network failure or timeout that survived all retries."""


class EndpointError(EndpointFailure):
    def __init__(self, status: int, body: str):
        super().__init__(f"endpoint returned HTTP {status}: {body[:500]}")
        self.status = status
        self.body = body


class EmptyResponseError(EndpointFailure):
    pass


class FixtureMissError(EndpointFailure):
    def __init__(self, fingerprint: str):
        super().__init__(f"no mock fixture for fingerprint {fingerprint}")
        self.fingerprint = fingerprint


# --- pipeline --------------------------------------------------------------


class CaptionParseError(DataError):
    def __init__(self, message: str, raw_text: str):
        super().__init__(message)
        self.raw_text = raw_text


class LimitViolationError(DataError):
    pass


class OverlapError(DataError):
    pass


class ExtractionError(DataError):
    def __init__(self, message: str, event: int | None = None):
        super().__init__(message)
        self.event = event


class RefinementError(DataError):
    def __init__(self, message: str, report: Any = None):
        super().__init__(message)
        self.report = report


class LexiconError(ConfigError):
    pass


# --- training / evaluation -------------------------------------------------


class GroupSizeError(DataError):
    pass


class TrainingError(EvsgError):
    def __init__(self, message: str, iteration: int | None = None):
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)
        self.iteration = iteration


class PredictionFileError(DataError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


class DuplicateIdError(PredictionFileError):
    pass


class EmptySetError(DataError):
    pass
