"""Exception types shared across the store, filters and attack tooling."""


class LsmGuardError(Exception):
    """Base class for every error raised by this package."""


class UsageError(LsmGuardError, ValueError):
    """Bad arguments: wrong block width, invalid parameters, malformed specs."""


class InvalidParams(UsageError):
    pass


class KeyTooLong(UsageError):
    """Raw key does not fit in one permutation block."""


class CorruptBlock(LsmGuardError):
    """A permuted block does not decode to a validly padded key."""


class EmptyRun(LsmGuardError):
    pass


class CorruptRun(LsmGuardError):
    """Checksum, magic or structural failure while reading a run file."""


class OpenFailed(LsmGuardError):
    """Missing or unreadable manifest."""


class BudgetExhausted(LsmGuardError):
    """The brute-force key search hit its candidate cap before saturating."""

    def __init__(self, message: str, keys=None, candidates_tried: int = 0):
        super().__init__(message)
        self.keys = list(keys or [])
        self.candidates_tried = candidates_tried


class InvariantViolation(LsmGuardError, AssertionError):
    """Caller broke an internal precondition (e.g. unsorted run input)."""
