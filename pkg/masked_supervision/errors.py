from __future__ import annotations


class MSLError(Exception):
    """Base class for all errors raised by masked_supervision."""
    pass


class ShapeError(MSLError, ValueError):
    """Raised when tensor shapes do not agree."""
    pass


class NonFiniteError(MSLError, ArithmeticError):
    """Raised when a NaN or Inf shows up where finite values are required."""
    pass


class GraphError(MSLError):
    """Raised on invalid use of the autodiff graph (e.g. backward on a non-scalar)."""
    pass


class CheckpointError(MSLError):
    """Raised when a checkpoint file is corrupt, truncated or mismatched."""
    pass


class MaskBudgetError(MSLError):
    """Raised when a mask subset cannot be filled within the attempt budget."""
    pass


class EmptySubsetError(MSLError):
    """Raised when sampling from an empty mask subset."""
    pass


class MaskError(MSLError, ValueError):
    """Raised when a mask lacks the data an operation needs (e.g. gray values for soft masking)."""
    pass


class DatasetError(MSLError):
    """Raised on invalid or unreadable dataset manifests."""
    pass


class DivergenceError(MSLError):
    """Raised when the training loss or gradients become non-finite."""
    pass


class WeightSharingError(MSLError):
    """Raised when the two branches of a step did not read the same parameters."""
    pass


class ConfigError(MSLError, ValueError):
    """Raised on invalid or unknown configuration values."""
    pass
