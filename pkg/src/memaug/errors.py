"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """Invalid model, fusion, or run configuration."""


class DataError(ValueError):
    """Invalid corpus, vocabulary, or task input."""


class DegenerateRowError(ValueError):
    """A softmax row had every entry masked."""


class EmptyLossError(ValueError):
    """A loss was requested over zero contributing positions."""


class OptimizerError(RuntimeError):
    """Optimizer state is inconsistent with the parameters it updates."""


class GradientCheckError(RuntimeError):
    """An analytic gradient disagreed with finite differences."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class CheckpointError(RuntimeError):
    """Checkpoint file is malformed, corrupt, or incompatible."""
