"""Exception types raised across the package."""


class AutoEnsembleError(Exception):
    """Base class for all package errors."""


class ShapeError(AutoEnsembleError, ValueError):
    """Array dimensions do not line up."""


class PreconditionError(AutoEnsembleError, ValueError):
    """An argument violates an operation's precondition."""


class EvaluationError(AutoEnsembleError, ArithmeticError):
    """A function produced a non-finite value."""


class TrainingError(AutoEnsembleError):
    """A subnetwork's loss or parameters became non-finite."""


class UnsupportedMeasureError(AutoEnsembleError, ValueError):
    """A complexity measure is undefined for a subnetwork family."""


class OptimizationError(AutoEnsembleError):
    """Mixture-weight optimisation hit a non-finite gradient."""


class IterationError(AutoEnsembleError):
    """A search iteration produced no usable candidate."""


class CheckpointNotFoundError(AutoEnsembleError, FileNotFoundError):
    """No valid checkpoint exists in a directory."""


class RecoveryError(AutoEnsembleError):
    """A checkpoint failed verification during bookkeeping."""


class ClusterError(AutoEnsembleError):
    """A simulated cluster deadlocked or a worker crashed."""


class ConfigError(AutoEnsembleError, ValueError):
    """A run configuration is invalid."""


class DataError(AutoEnsembleError, ValueError):
    """A dataset file could not be parsed."""


class SchemaError(AutoEnsembleError, ValueError):
    """Dataset columns do not match a model's feature schema."""
