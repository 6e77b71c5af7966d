"""Exception taxonomy shared across the package."""


class SwarmPdeError(Exception):
    """Base class for all package errors."""


class ShapeError(SwarmPdeError, ValueError):
    """Operands with incompatible shapes reached a primitive."""


class ContractError(SwarmPdeError, RuntimeError):
    """An operation was called outside its contract (wrong tape, non-scalar
    backward seed, reused tape, zero-mass density, ...)."""


class NumericError(SwarmPdeError, ArithmeticError):
    """NaN/Inf state, singular linear system, or solver blow-up."""


class ConfigError(SwarmPdeError, ValueError):
    """Invalid configuration value or file."""


class CheckpointError(SwarmPdeError, RuntimeError):
    """Checkpoint is corrupted or incompatible with the requested run."""
