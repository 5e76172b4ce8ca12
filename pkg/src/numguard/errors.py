"""Exception hierarchy shared by every numguard module."""


class NumguardError(Exception):
    """Base class for all errors raised by numguard."""


class SchemaError(NumguardError):
    """Malformed graph, config or test-case document."""


class UnsupportedOperator(NumguardError):
    pass


class UnsupportedAttribute(NumguardError):
    pass


class CycleError(NumguardError):
    pass


class ShapeMismatch(NumguardError):
    pass


class MissingBinding(NumguardError):
    pass


class NonDifferentiableNode(NumguardError):
    pass


class NonFiniteGradient(NumguardError):
    """One-step training produced NaN/Inf gradients."""


class EmptySampleSet(NumguardError):
    pass


class NotARefinement(NumguardError):
    pass


class DomainError(NumguardError):
    """The whole input interval lies outside the operator's domain."""


class AnalysisError(NumguardError):
    """Abstract interpretation could not resolve a shape, index or control decision."""


class LoopBudgetExceeded(AnalysisError):
    pass


class NotDefectProne(NumguardError):
    pass


class NotDifferentiableMode(NumguardError):
    pass
