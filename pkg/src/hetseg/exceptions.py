"""Exception hierarchy shared by every subpackage."""


class HsegError(Exception):
    """Base class for all errors raised by hetseg."""


class ConfigError(HsegError, ValueError):
    """A configuration (model, pipeline, toy net, CLI input) is invalid."""


class SpecError(HsegError, ValueError):
    """Operator arguments do not agree with the operator spec."""


class AllocationError(HsegError, MemoryError):
    """A tensor would not fit the platform's index range."""


class GraphError(HsegError):
    """Malformed graph: cycle, duplicate producer, dangling tensor."""


class ExecutionError(HsegError):
    """Failure while executing a graph (e.g. a weight is missing)."""


class AnalysisError(HsegError):
    """The static analyzer could not resolve a node."""


class MetricError(HsegError, ValueError):
    """Invalid metric input (shape mismatch, empty set)."""


class BoundsError(HsegError, IndexError):
    """Tensor element index outside its logical shape."""
