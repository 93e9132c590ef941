"""Exception types shared across the engine."""


class MunasError(Exception):
    """Base class for all engine errors."""


class ValidationError(MunasError):
    """An architecture document or config violates a structural invariant."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class ParseError(MunasError):
    """Malformed document; carries the offending position when known."""

    def __init__(self, message: str, position: int | None = None):
        super().__init__(message)
        self.position = position


class LoweringError(MunasError):
    """Template cannot be lowered to an operator graph for the given input."""


class GenerationExhausted(MunasError):
    """Random generation retry budget exhausted (infeasible config/input pair)."""


class NoApplicableMorphism(MunasError):
    """No morphism instance produces a valid child for this template."""


class GraphTooLarge(MunasError):
    """Graph exceeds the node cap of the exact memory planner."""


class TrainDiverged(MunasError):
    """Training produced a non-finite loss."""


class LayerCollapsed(MunasError):
    """Structured pruning removed every group of a layer."""


class EvaluatorFailure(MunasError):
    """A candidate evaluation failed; the search may retry or skip."""


class CorruptCheckpoint(MunasError):
    """Checkpoint bytes could not be restored."""


class ProtocolError(MunasError):
    """Malformed message on the evaluation wire protocol."""

    def __init__(self, message: str, line: str | None = None):
        super().__init__(message)
        self.line = line


class EvalTimeout(MunasError):
    """A remote evaluation did not answer within its deadline."""


class TransportClosed(MunasError):
    """The evaluation transport closed while requests were outstanding."""
