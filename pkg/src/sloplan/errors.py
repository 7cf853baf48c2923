"""Exception hierarchy shared by the planning and simulation modules."""


class SloplanError(Exception):
    """Base class for every error raised by this package."""


class InsufficientSamplesError(SloplanError):
    pass


class DegenerateSamplesError(SloplanError):
    pass


class InfeasibleBudgetError(SloplanError):
    """A time budget is below the latency of a single-token batch."""


class ParseError(SloplanError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class InvariantViolation(SloplanError):
    def __init__(self, message: str, request_id: str | None = None):
        self.request_id = request_id
        prefix = f"request {request_id!r}: " if request_id is not None else ""
        super().__init__(prefix + message)


class InvalidDistributionError(SloplanError):
    pass


class NoFeasiblePlanError(SloplanError):
    """Speculative decoding cannot leave a nonnegative prefill budget."""


class InternalInconsistencyError(SloplanError):
    """A reconstructed plan misses a deadline the DP promised to meet."""


class MemoryExhaustedError(SloplanError):
    pass


class CannotSatisfyError(SloplanError):
    """Standard-tier memory demand exceeds what preemption can free."""


class UnknownRequestError(SloplanError):
    pass


class BoundsNotBracketingError(SloplanError):
    pass


class InvalidParametersError(SloplanError):
    pass


class SimulationError(SloplanError):
    def __init__(self, message: str, time: float):
        self.time = time
        super().__init__(f"t={time:.6f}s: {message}")
