"""Exception types raised across the package."""


class CheckscoreError(Exception):
    """Base class for all package errors."""


# rule grammar
class RuleError(CheckscoreError, ValueError):
    """A rule could not be parsed or failed validation."""


class MalformedSyntax(RuleError):
    pass


class UnknownFeature(RuleError):
    def __init__(self, name: str):
        super().__init__(f"unknown feature: {name!r}")
        self.name = name


class TypeMismatch(RuleError):
    pass


class DepthExceeded(RuleError):
    pass


class InvalidParameter(RuleError):
    pass


# data
class DataError(CheckscoreError):
    """Input data could not be loaded or split."""


class FileUnreadable(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class NonBinaryLabel(DataError):
    pass


class NonMonotoneTimestamps(DataError):
    pass


class TooFewGroups(DataError):
    pass


class SplitViolation(CheckscoreError):
    """A routine was handed data from a split it must not read."""


# evaluation
class EvaluationError(CheckscoreError, ValueError):
    pass


class UnusableStats(EvaluationError):
    pass


class SingleClass(EvaluationError):
    pass


class LengthMismatch(EvaluationError):
    pass


class EmptyChecklist(EvaluationError):
    pass


class InsufficientFolds(EvaluationError):
    pass


# pool / proposal / assembly
class PoolIOError(CheckscoreError, OSError):
    pass


class TransportError(CheckscoreError):
    """Remote endpoint unreachable after all retry attempts."""


class BudgetExhausted(CheckscoreError):
    """The per-fold remote call cap has been reached."""


class NoNumericFeatures(CheckscoreError):
    pass


class EmptyPool(CheckscoreError):
    pass


class AgentSpecInvalid(CheckscoreError):
    pass


class UnreachableTarget(CheckscoreError):
    pass


class ConfigError(CheckscoreError):
    pass
