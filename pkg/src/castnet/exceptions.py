"""Exception types shared across the package."""


class CastnetError(Exception):
    """Base class for all package errors."""


class ContractError(CastnetError, ValueError):
    """An input violates a documented precondition."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class ShapeError(ContractError):
    """An array has the wrong shape for the requested operation."""


class ConfigError(CastnetError, ValueError):
    """A configuration value or key is invalid."""


class ConvergenceError(CastnetError, RuntimeError):
    """The structure-learning solver hit its penalty cap without becoming acyclic."""

    def __init__(self, message, h=None, rho=None):
        super().__init__(message)
        self.h = h
        self.rho = rho


class CyclicGraphError(CastnetError, ValueError):
    """A contemporaneous matrix that must be acyclic contains a cycle."""

    def __init__(self, message, cycle=None):
        super().__init__(message)
        self.cycle = cycle


class TrainingDivergenceError(CastnetError, RuntimeError):
    """Non-finite values appeared while training the forecaster."""


class IngestionError(CastnetError, ValueError):
    """A data file could not be parsed into a uniform series."""


class MissingArtifactError(CastnetError, FileNotFoundError):
    """A pipeline stage ran before the stage that produces its inputs."""
