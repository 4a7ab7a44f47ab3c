"""Exception hierarchy.

Validation problems (bad input, bad configuration) derive from
:class:`ValidationError`; numerical breakdowns derive from
:class:`NumericalError`. The CLI maps the two families to distinct exit codes.
"""


class IcsError(Exception):
    """Base class for all package errors."""


class ValidationError(IcsError, ValueError):
    pass


class NumericalError(IcsError, ArithmeticError):
    pass


class DimensionMismatch(ValidationError):
    pass


class InvalidDf(ValidationError):
    pass


class InvalidParams(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class InvalidTreatment(ValidationError):
    pass


class SchemaViolation(ValidationError):
    pass


class InsufficientClusters(ValidationError):
    pass


class TooManyAssignments(ValidationError):
    pass


class ConstantTransform(ValidationError):
    pass


class InvalidScenario(ValidationError):
    pass


class RankDeficient(NumericalError):
    pass


class SingularSubCov(NumericalError):
    pass


class AllStatisticsUndefined(NumericalError):
    pass


class DegenerateResult(NumericalError):
    pass
