"""Exception hierarchy shared across the package."""


class DualFedError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DualFedError, ValueError):
    """Operand shapes are incompatible."""


class NumericalError(DualFedError, ArithmeticError):
    """A computation produced NaN or Inf."""


class StateError(DualFedError, RuntimeError):
    """An object was used in a state that does not allow the call."""


class InputError(DualFedError, ValueError):
    """Invalid input values (labels, empty inputs, length mismatches)."""


class ConfigError(DualFedError, ValueError):
    """Invalid configuration."""


class ProtocolError(DualFedError, RuntimeError):
    """Federated payloads violate the exchange protocol."""
