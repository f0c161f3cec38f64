"""Exception types shared across the package."""


class OptsyncError(Exception):
    """Base class for all package errors."""


class ConfigError(OptsyncError):
    """Invalid or inconsistent configuration."""


class MalformedExchange(OptsyncError):
    """A sync exchange is missing timestamps required by the computation."""


class MissingProfile(OptsyncError):
    """A profiled quantity (delay, drift, correction) is not available."""


class CircuitLost(OptsyncError):
    """The circuit disappeared during an operation that required it."""


class ExchangeAbandoned(OptsyncError):
    """A deferred exchange exhausted its retry budget."""


class NoReference(OptsyncError):
    """No reference ToR is available for timestamp correction."""


class BootstrapError(OptsyncError):
    """The coarse clock bootstrap did not reach the required accuracy."""


class EmptyInput(OptsyncError):
    """An aggregation was asked to summarize zero samples."""
