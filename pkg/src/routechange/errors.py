"""Exception hierarchy.

Everything raised on purpose by the package derives from ``RouteChangeError``.
``DataError`` marks problems with user input (bad files, unlabeled data,
degenerate splits); the CLI maps it to exit code 2.
"""
from __future__ import annotations


class RouteChangeError(Exception):
    """Base class for all package errors."""


class DataError(RouteChangeError):
    """Input data violates a contract."""


class MissingColumn(DataError):
    def __init__(self, name: str):
        super().__init__(f"missing required column: {name!r}")
        self.name = name


class MalformedRow(DataError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class InvalidCount(MalformedRow):
    """``total_replies_last_hop`` exceeds ``total_probes_sent``."""


class MalformedLine(DataError):
    def __init__(self, line: int, reason: str = "malformed JSON record"):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class UnlabeledData(DataError):
    """An operation that needs labels got an unlabeled dataset."""


class DegenerateSplit(DataError):
    pass


class UnsortedInput(DataError):
    pass


class EmptyInput(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class SingleClass(DataError):
    pass


class TooFewPerClass(DataError):
    pass


class InvalidConfig(RouteChangeError, ValueError):
    pass


class EmptySpace(InvalidConfig):
    pass


class VersionMismatch(RouteChangeError):
    pass


class CorruptEncoding(RouteChangeError):
    pass


class AllZeroDifferences(RouteChangeError, ValueError):
    pass


class InsufficientPairs(RouteChangeError, ValueError):
    pass


class ObjectiveFailure(RouteChangeError):
    def __init__(self, trial: int, cause: BaseException | None = None):
        super().__init__(f"objective failed on trial {trial}: {cause!r}")
        self.trial = trial
        self.cause = cause
