"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DTypeError(TypeError):
    """Operand dtypes disagree or are unsupported."""


class RankError(ValueError):
    """A requested factorization rank is below the full-rank lower bound."""


class ConvergenceError(RuntimeError):
    """An iterative numerical routine failed to converge."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class ConfigError(ValueError):
    """A config file or TrainConfig field is invalid."""


class TopologyError(ValueError):
    """Two models do not share the same architecture topology."""


class ArchiveError(ValueError):
    """A tensor archive is malformed or fails its integrity check."""
