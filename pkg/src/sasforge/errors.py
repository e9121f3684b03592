"""Exception hierarchy shared by every sasforge module."""


class SasforgeError(Exception):
    """Base class; the CLI maps subclasses to exit codes."""

    exit_code = 1


class ParameterError(SasforgeError, ValueError):
    """An argument is outside its documented domain."""

    exit_code = 2


class ValidationError(SasforgeError, ValueError):
    """A configuration or scene violates an invariant."""

    exit_code = 2


class ConfigError(SasforgeError):
    """Missing or inconsistent configuration (e.g. an absent checkpoint)."""

    exit_code = 2


class ShapeError(SasforgeError, ValueError):
    """Operands have incompatible shapes."""

    exit_code = 3


class DataError(SasforgeError):
    """Input data is empty, malformed, or non-finite."""

    exit_code = 3


class NumericalAbort(SasforgeError):
    """Training produced a non-finite loss."""

    exit_code = 4
