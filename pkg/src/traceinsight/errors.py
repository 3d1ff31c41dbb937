"""Exception hierarchy shared by every traceinsight module."""

from __future__ import annotations


class TraceInsightError(Exception):
    """Base class for all user-facing errors raised by the toolkit."""


# ingest
class MalformedField(TraceInsightError):
    pass


class UnparsableTimestamp(TraceInsightError):
    pass


class AmbiguousUnit(TraceInsightError):
    pass


class ParseError(TraceInsightError):
    pass


class TooManyErrors(TraceInsightError):
    pass


# preprocess
class NonNumericField(TraceInsightError):
    pass


class NoMatchingEvents(TraceInsightError):
    pass


class AllMissing(TraceInsightError):
    pass


class UpsampleNotSupported(TraceInsightError):
    pass


class EmptyOverlap(TraceInsightError):
    pass


class GridMismatch(TraceInsightError):
    """Series grids cannot be brought onto a common sample lattice."""


# module registry
class DuplicateModule(TraceInsightError):
    pass


class UnknownModule(TraceInsightError):
    pass


class InvalidParameter(TraceInsightError):
    def __init__(self, key: str, reason: str) -> None:
        super().__init__(f"invalid parameter {key!r}: {reason}")
        self.key = key
        self.reason = reason


# analyses
class TooShort(TraceInsightError):
    pass


class DegenerateInput(TraceInsightError):
    pass


class MissingField(TraceInsightError):
    pass


class ConstantSeries(TraceInsightError):
    pass


# report / export
class UnknownReportKind(TraceInsightError):
    pass


class IncompatibleKind(TraceInsightError):
    pass


class UnsupportedFormat(TraceInsightError):
    pass


# synthgen
class InvalidSpec(TraceInsightError):
    pass
