"""Exception types shared across the library and the CLI."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ParameterError(ValueError):
    """A scalar argument or configuration value is out of its legal range."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class ContractError(RuntimeError):
    """A caller-visible contract was violated (e.g. a non-deterministic forward)."""


class ConfigError(ValueError):
    """A config file or CLI flag combination is invalid. Maps to exit code 2."""
