"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class PdmpError(Exception):
    """Base class for every error raised by the package."""


class NotOnBoundary(PdmpError):
    pass


class DegeneratePair(PdmpError):
    """Relative speed below the collision kernel's support."""


class RejectionBudgetExceeded(PdmpError):
    pass


class OutsideSupport(PdmpError):
    """A log-density gradient was requested where the density vanishes."""


class NearSingular(PdmpError):
    pass


class PathFailure(PdmpError):
    """Errors that abort a single simulated path (counted as error paths)."""


class EventCapExceeded(PathFailure):
    pass


class SimultaneousEvents(PathFailure):
    pass


class ContainsSuppressedCollision(PdmpError):
    pass


class CoordinateExhausted(PdmpError):
    pass


class InvalidCoordinate(PdmpError):
    pass


class OrderChanged(PdmpError):
    pass


class UnsupportedDirection(PdmpError):
    pass


class HorizonOnEvent(PdmpError):
    pass


class NotPerturbable(PdmpError):
    pass


class HorizonTooClose(PdmpError):
    pass


class DepthExceeded(PdmpError):
    pass


class InsufficientPaths(PdmpError):
    pass


class ConfigError(PdmpError):
    pass


class PathError(PdmpError):
    """A per-path error annotated with the index of the failing path."""

    def __init__(self, path_index: int, cause: Exception):
        super().__init__(f"path {path_index}: {type(cause).__name__}: {cause}")
        self.path_index = path_index
        self.cause = cause
