"""
Exception types shared by the telescope toolkit modules
"""


class TelescopeError(Exception):
    """Base class for every error raised by the toolkit"""


class ConfigError(TelescopeError, ValueError):
    """Invalid parameters, configuration files or command-line values"""


class DataError(TelescopeError, ValueError):
    """Input data that cannot be processed (malformed CSV, NaN ticks, ...)"""


class EmbeddingError(TelescopeError):
    """Circulant embedding of an fGn covariance is not positive semi-definite"""


class SubspaceError(TelescopeError, ValueError):
    """Degenerate subspace computations (empty bases, missing eigengap)"""
