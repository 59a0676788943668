"""Exception hierarchy. Each error carries the process exit code the CLI maps it to."""


class ReconError(Exception):
    exit_code = 1


# --- Configuration (exit 2) ---

class ConfigError(ReconError):
    exit_code = 2


class InvalidConfig(ConfigError):
    pass


class InfeasibleMask(ConfigError):
    pass


class CheckpointMismatch(ConfigError):
    pass


# --- Shapes (exit 2) ---

class ShapeMismatch(ReconError, ValueError):
    exit_code = 2


class OddDimension(ShapeMismatch):
    pass


class OddSpatialDim(ShapeMismatch):
    pass


class IndivisibleShape(ShapeMismatch):
    pass


class ImageTooSmall(ShapeMismatch):
    pass


# --- I/O (exit 3) ---

class DataIOError(ReconError):
    exit_code = 3


class MissingDataset(DataIOError):
    pass


class CorruptFile(DataIOError):
    pass


class EmptyVolume(DataIOError):
    pass


# --- Numerics (exit 4) ---

class NumericError(ReconError):
    exit_code = 4


class NonFiniteInput(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass


class NonPositiveDelta(NumericError):
    pass


class ConstantImage(NumericError):
    """Raised for a degenerate slice (max == min); ingestion skips it."""


class ZeroReference(NumericError):
    pass
