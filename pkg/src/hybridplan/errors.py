"""Exception types shared across the planner."""


class PlannerError(Exception):
    """Base class for all planner errors."""


class ParseError(PlannerError):
    """Input file is not syntactically valid JSON."""


class ValidationError(PlannerError):
    """A profile, strategy, or plan violates one of its invariants."""


class NoBandwidthEntry(PlannerError):
    """No bandwidth-table entry covers the requested (span, group_size)."""


class InvalidDeviceCount(PlannerError):
    """Device count is zero or not a power of two."""


class InconsistentStrategy(PlannerError):
    """A strategy's degrees do not multiply out to the stage device count."""


class IndivisibleMicrobatch(PlannerError):
    """Microbatch size is not divisible by the strategy's data-parallel degree."""


class Infeasible(PlannerError):
    """No strategy assignment for a stage fits the memory budget."""


class NoFeasiblePlan(PlannerError):
    """Every (pipeline degree, microbatch) combination is infeasible."""

    def __init__(self, message: str, *, stage_index: int | None = None,
                 min_achievable_bytes: int | None = None,
                 budget_bytes: int | None = None):
        super().__init__(message)
        self.stage_index = stage_index
        self.min_achievable_bytes = min_achievable_bytes
        self.budget_bytes = budget_bytes


class OracleTooLarge(PlannerError):
    """Instance exceeds the brute-force oracle's guard rails."""


class SchedulingDeadlock(PlannerError):
    """Internal simulator assertion; must be unreachable for valid plans."""
