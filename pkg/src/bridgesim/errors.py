"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes, so samplers and numeric
routines should raise the most specific class that applies.
"""


class BridgeSimError(Exception):
    """Base class for all library errors."""


class UsageError(BridgeSimError):
    """Invalid arguments or mismatched inputs (caller bug, exit code 2)."""


class DomainError(BridgeSimError):
    """A value lies outside the mathematically valid domain (exit code 3)."""


class NumericError(BridgeSimError):
    """A numerical procedure failed to converge or lost validity (exit code 3)."""


class ModelError(NumericError):
    """The model violates a structural requirement (e.g. infinite speed measure)."""


class BoundaryViolationError(NumericError):
    """A simulated path left the open state interval.

    Carries the index of the offending step so rejection samplers can
    report where paths die.
    """

    def __init__(self, message, step_index):
        super().__init__(message)
        self.step_index = step_index


class BudgetError(BridgeSimError):
    """A sampling budget was exhausted (exit code 4)."""


class RejectionBudgetError(BudgetError):
    """No crossing found within the allowed number of attempts."""

    def __init__(self, message, attempts, boundary_aborts):
        super().__init__(message)
        self.attempts = attempts
        self.boundary_aborts = boundary_aborts


class HittingBudgetError(BudgetError):
    """No intersecting path found within the trial cap (hit probability ~ 0)."""

    def __init__(self, message, trials):
        super().__init__(message)
        self.trials = trials
