"""Exception types shared across the package."""


class F2DCError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(F2DCError, ValueError):
    """Operand shapes do not conform."""


class DegenerateInputError(F2DCError, ValueError):
    """Input is well-typed but mathematically degenerate (zero norm, too few rows, ...)."""


class ContractError(F2DCError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(F2DCError, ValueError):
    """Invalid configuration value. ``field`` names the offending setting."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class RoundError(F2DCError, RuntimeError):
    """A federated round could not be executed."""


class EmptyClientError(F2DCError):
    """Raised by local training when a client holds no samples; the round skips it."""


class InvariantViolation(F2DCError, AssertionError):
    """A run-time invariant check failed."""
