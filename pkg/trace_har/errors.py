"""
Exception hierarchy for the activity pipeline
"""
from typing import Optional


class TraceError(Exception):
    """Base error; exit_code is what the CLI returns when it escapes"""

    exit_code = 1

    def __init__(self, message: str, *, hint: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.hint = hint


# Configuration / usage errors (exit 2)
class ConfigError(TraceError):
    exit_code = 2


# Data errors (exit 3)
class DataError(TraceError):
    exit_code = 3


class MalformedLineError(DataError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class MalformedRowError(DataError):
    def __init__(self, row_no: int, message: str):
        super().__init__(f"row {row_no}: {message}")
        self.row_no = row_no


class UnknownSensorError(DataError):
    def __init__(self, line_no: int, sensor_id: str):
        super().__init__(f"line {line_no}: sensor '{sensor_id}' is not in the metadata")
        self.line_no = line_no
        self.sensor_id = sensor_id


class MalformedEntryError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class EmptyTimelineError(DataError):
    pass


class SpanMismatchError(DataError):
    exit_code = 2


class SpanTooShortError(DataError):
    pass


class UnmappedLabelError(DataError):
    def __init__(self, label: str):
        super().__init__(f"label '{label}' has no entry in the label map")
        self.label = label


class OneEmptyDistributionError(DataError):
    pass


class InvalidSegmentError(DataError):
    pass


class VersionConflictError(DataError):
    pass


# Reasoning errors; the parse failures trigger the retry policy
class ReasonerError(TraceError):
    exit_code = 3


class PromptRenderError(ReasonerError):
    pass


class WindowSizeMismatchError(ReasonerError):
    pass


class ParseFailureError(ReasonerError):
    pass


class CountMismatchError(ParseFailureError):
    pass


class IllegalLabelError(ParseFailureError):
    pass


class CoverageGapError(ParseFailureError):
    pass


class OverlapWithinResponseError(ParseFailureError):
    pass


class BackendUnavailableError(TraceError):
    exit_code = 4
