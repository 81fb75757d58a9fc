"""Exception hierarchy shared by all modules."""


class FtlError(Exception):
    """Base class for every error raised by degenftl.

    Optional keyword context (particle ``index``, ``time``, ``name``) is kept
    as attributes for callers that want to report it.
    """

    exit_code = 1

    def __init__(self, *args, **context):
        super().__init__(*args)
        self.context = context
        for key, value in context.items():
            setattr(self, key, value)


class ConfigError(FtlError, ValueError):
    """A configuration violates one or more model invariants.

    ``errors`` holds one human-readable message per violation, each naming the
    offending index or field.
    """

    exit_code = 2

    def __init__(self, errors, **context):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors), **context)


class ConfigParseError(ConfigError):
    exit_code = 2


class MissingInput(FtlError):
    exit_code = 2


class DegenerateGap(FtlError, ValueError):
    """Nonpositive distance between consecutive particles."""


class InvalidDensity(FtlError, ValueError):
    pass


class OrderingViolation(FtlError):
    exit_code = 3


class ToleranceNotMet(FtlError):
    exit_code = 4


class StepUnderflow(ToleranceNotMet):
    pass


class QuadratureFailure(FtlError):
    exit_code = 4


class SaturatedCellAtPositiveTime(FtlError):
    exit_code = 3


class BoundViolated(FtlError):
    exit_code = 5


class InvariantViolation(FtlError):
    exit_code = 6


class InsufficientPoints(FtlError, ValueError):
    pass


class ConfigMismatch(FtlError, ValueError):
    pass
