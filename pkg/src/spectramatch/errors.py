"""Exception hierarchy shared by every module."""


class SpectraMatchError(Exception):
    """Base class for all library errors."""


class InputError(SpectraMatchError, ValueError):
    """Malformed or inconsistent input (ambient mismatch, bad JSON, out-of-range index)."""


class GuardError(InputError):
    """A size guard was exceeded.  ``guard`` names the limit that tripped."""

    def __init__(self, guard, message):
        super().__init__(f"{guard}: {message}")
        self.guard = guard


class DegenerateTargetError(InputError):
    pass


class ToleranceTooFineError(InputError):
    pass


class PreconditionError(SpectraMatchError):
    """A caller violated an operation precondition (e.g. reflecting at a non-monotone node)."""


class ConsistencyError(SpectraMatchError):
    """Internal invariant failure, e.g. colliding orbit members."""


class ResourceExhaustedError(SpectraMatchError):
    """No feasible truncation level was found within the allowed range.

    ``diagnostics`` carries whatever the caller needs to decide how to proceed
    (good-element energy histogram, remainder size, level-count certificate).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InfeasibleError(SpectraMatchError):
    pass
