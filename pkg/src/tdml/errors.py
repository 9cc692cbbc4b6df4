"""Exception hierarchy shared across the package."""


class TDMLError(Exception):
    """Base class for every error raised by this package."""


class EmptyBody(TDMLError):
    pass


class ClockRegression(TDMLError):
    pass


class AuthFailure(TDMLError):
    pass


class ChainFormatError(TDMLError):
    """A chain dump line could not be parsed into a block."""


class NotFound(TDMLError, KeyError):
    pass


class ShapeMismatch(TDMLError, ValueError):
    pass


class MissingCache(TDMLError):
    pass


class InsufficientMemory(TDMLError):
    def __init__(self, message: str, first_unplaced: int | None = None):
        super().__init__(message)
        self.first_unplaced = first_unplaced


class InsufficientCandidates(TDMLError):
    pass


class IllegalTransition(TDMLError):
    def __init__(self, phase, event):
        super().__init__(f"event {event!r} is illegal in phase {phase!r}")
        self.phase = phase
        self.event = event


class DegenerateGeometry(TDMLError):
    pass


class IncompleteEvidence(TDMLError):
    pass


class NoPayout(TDMLError):
    pass


class ConfigError(TDMLError, ValueError):
    pass


class SchemaMismatch(TDMLError, ValueError):
    pass
