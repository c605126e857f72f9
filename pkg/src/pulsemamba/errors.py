"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand extents are inconsistent with an operation's contract."""


class GraphError(RuntimeError):
    """Backward requested on a tensor the tape cannot reach, or replayed twice."""


class NumericError(ArithmeticError):
    """A NaN/Inf showed up where the contract requires finite values."""


class ConfigError(ValueError):
    """A configuration value violates its documented invariants."""


class CapacityError(ConfigError):
    """A flattened sequence exceeds the configured token budget."""


class FormatError(ValueError):
    """An on-disk artifact (dataset, checkpoint, config) is malformed."""


class InsufficientDataError(ValueError):
    """Too few samples to run a spectral operation."""
