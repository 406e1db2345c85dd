"""Exception hierarchy shared across the package."""


class FedCCPError(Exception):
    """Base class for all package errors."""


class ShapeError(FedCCPError, ValueError):
    """Array dimensions do not chain or align."""


class TrainingError(FedCCPError, RuntimeError):
    """Optimization produced a non-finite loss or gradient.

    ``step`` carries the optimizer step index at which it happened, when known.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NumericError(FedCCPError, ArithmeticError):
    """A flow evaluation produced non-finite values.

    ``layer`` is the index of the coupling layer that failed, when known.
    """

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class ProtocolError(FedCCPError, RuntimeError):
    """Federated protocol violation (shape mismatch, all clients failed)."""


class IngestionError(FedCCPError, ValueError):
    """CSV input could not be turned into a usable dataset."""


class ConfigError(FedCCPError, ValueError):
    """Invalid experiment, scenario or schema configuration."""
