"""Exception types shared across the package."""


class ArchGraphError(Exception):
    """Base class for all package errors."""


class CyclicInput(ArchGraphError):
    """An operation that needs a DAG received a graph with a cycle."""


class NonConvergence(ArchGraphError):
    pass


class NoFeasibleSubgraph(ArchGraphError):
    pass


class TooLarge(ArchGraphError):
    pass


class InsufficientData(ArchGraphError):
    pass


class DimensionMismatch(ArchGraphError, ValueError):
    pass


class MissingEdgeData(ArchGraphError, KeyError):
    pass


class ShapeMismatch(ArchGraphError, ValueError):
    pass


class DegenerateLabels(ArchGraphError):
    """Every compared pair is tied, so no training pair has a winner."""


class DegenerateInput(ArchGraphError, ValueError):
    pass


class ParseError(ArchGraphError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingMetric(ArchGraphError, ValueError):
    pass


class BudgetExceeded(ArchGraphError):
    pass


class DuplicateEvaluation(ArchGraphError):
    pass


class ConfigError(ArchGraphError, ValueError):
    pass
