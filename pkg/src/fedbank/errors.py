"""Exception types shared across the package."""


class FedbankError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FedbankError):
    """Array dimensions inconsistent with a model spec or with peer arrays."""


class DomainError(FedbankError):
    """Argument value outside an operation's documented domain."""


class ConfigError(FedbankError):
    """Invalid configuration; the message names the offending field."""


class ParseError(FedbankError):
    """Malformed input file; the message carries the line number."""


class SchemaError(ParseError):
    """File content contradicts its own declared schema (e.g. column count)."""


class BudgetExhaustedError(FedbankError):
    """A client was charged beyond its access budget."""


class ContractViolationError(DomainError):
    """Caller passed data that violates a documented precondition."""


class UndefinedSimilarityError(DomainError):
    """Similarity requested for a zero-length direction vector."""


class SimulationHalted(FedbankError):
    """No eligible clients remain; the driving loop should stop gracefully."""
