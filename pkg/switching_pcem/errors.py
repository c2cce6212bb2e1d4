"""Exception hierarchy shared by every module and mapped to CLI exit codes"""


class PCEMError(Exception):
    """Base class for all switching-pcem errors"""

    exit_code = 1


class ValidationError(PCEMError, ValueError):
    """Input violates a documented precondition or invariant"""

    exit_code = 2


class ConfigError(PCEMError, ValueError):
    """Experiment configuration is missing, malformed or inconsistent"""

    exit_code = 2

    def __init__(self, message: str, field: str = None, source: str = None):
        """Initialize ConfigError

        Args:
            message: Human readable description
            field: Dot path of the offending field, if known
            source: Config file the field was read from, if any
        """
        self.field = field
        self.source = source
        prefix = ""
        if source:
            prefix += f"{source}: "
        if field:
            prefix += f"{field}: "
        super().__init__(f"{prefix}{message}")


class NumericalError(PCEMError, ArithmeticError):
    """A numerical procedure failed (overflow, non-convergence, degenerate fit)"""

    exit_code = 3


class ResourceGuardError(PCEMError):
    """Requested run exceeds the desk-scale guard without explicit consent"""

    exit_code = 4
