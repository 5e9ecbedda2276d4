"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError and IngestionError
exit 2, NumericalError 3, and I/O failures 4.
"""


class ExtattrError(Exception):
    """Base class for package errors."""


class ParameterDomainError(ExtattrError, ValueError):
    """A distribution parameter is outside its valid domain."""


class IngestionError(ExtattrError, ValueError):
    """An input file or table violates its schema or consistency rules."""


class ConfigError(ExtattrError, ValueError):
    """A run configuration is invalid."""


class NumericalError(ExtattrError, RuntimeError):
    """A numerical routine failed in a way that indicates a bug or a
    degenerate problem (non-PD precision, Cholesky failure, ...)."""


class ConvergenceError(NumericalError):
    """An optimizer exhausted its restart schedule without converging."""
