"""Exception types shared across the planner."""


class PlannerError(Exception):
    """Base class for all planner errors."""


class ParseError(PlannerError):
    """Raised when a config document is malformed."""


class ValidationError(PlannerError):
    """Raised when a parsed value violates an invariant.

    The message always names the offending field.
    """

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class UnknownPreset(PlannerError):
    """Raised for a preset name that is not shipped with the tool."""


class InvalidStrategy(PlannerError):
    """Raised when a parallel strategy fails its divisibility checks."""


class EmptySearchSpace(PlannerError):
    """Raised when no strategy satisfies the search constraints."""


class IncompletePlan(PlannerError):
    """Raised when a pipeline plan does not cover all model layers."""


class InconsistentPlan(PlannerError):
    """Raised when a plan disagrees with the strategy shape or deadlocks."""


class UnsupportedSchedule(PlannerError):
    """Raised for a schedule kind/shape combination with no defined order."""


class Infeasible(PlannerError):
    """Raised when no pipeline plan fits the device memory cap.

    Carries the minimal achievable per-device memory so callers can report
    how far the cap is from workable.
    """

    def __init__(self, message, min_memory_bytes=None):
        self.min_memory_bytes = min_memory_bytes
        super().__init__(message)


class InvalidParams(PlannerError):
    """Raised for out-of-range routing or overlap parameters."""


class InconsistentInput(PlannerError):
    """Raised when a routing table disagrees with its expert layout."""


class ShapeMismatch(PlannerError):
    """Raised when sample counts do not tile devices evenly."""


class EmptyTrace(PlannerError):
    """Raised when asked to render a trace with no events."""
