"""Exception types shared across the package."""


class RegalignError(Exception):
    """Base class for all package errors."""


class DimensionError(RegalignError, ValueError):
    """Shapes or sizes of inputs do not agree."""


class DegenerateRotationError(RegalignError, ArithmeticError):
    """Rotation angle at pi: the twist axis sign is not recoverable."""


class DivergedError(RegalignError, RuntimeError):
    """Optimization state has no valid pixels left."""


class NumericalFailureError(RegalignError, RuntimeError):
    """A factorization or solve failed (non-finite or indefinite system)."""


class InfeasiblePoseError(RegalignError, ValueError):
    """Camera baseline leaves too little of the reference view visible."""


class RenderConsistencyError(RegalignError, RuntimeError):
    """Rendered pair failed the cross-view warp consistency check."""


class ConfigError(RegalignError, ValueError):
    """Run configuration is malformed or inconsistent."""


class CheckpointError(RegalignError, ValueError):
    """Checkpoint file is malformed or of an unknown version."""
