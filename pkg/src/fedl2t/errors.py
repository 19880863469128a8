"""Exception hierarchy shared across the package."""


class FedL2TError(Exception):
    """Base class for all package errors."""


class InputError(FedL2TError, ValueError):
    """A runtime input violates an operation's preconditions (bad labels, shapes, distributions)."""


class ContractError(FedL2TError, RuntimeError):
    """Two components that must be structurally congruent are not (layouts, traces, batch identity)."""


class ConfigError(FedL2TError, ValueError):
    """A configuration value or file is invalid."""


class CheckpointError(FedL2TError, RuntimeError):
    """A checkpoint file is corrupt or incompatible with the current run."""
