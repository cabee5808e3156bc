"""Exception types shared across the toolkit."""


class PiaveError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(PiaveError, ValueError):
    """Shapes, lengths or sample rates of the operands do not line up."""


class InvalidPoseError(PiaveError, ValueError):
    """Pose parameters violate their invariants (f <= 0, R not a rotation)."""


class UnderdeterminedError(PiaveError, ValueError):
    """Too few or degenerate landmark correspondences for alignment."""


class TopologyError(PiaveError, ValueError):
    """Mesh/UV topology mismatch or invalid UV cell reference."""


class DegenerateSignalError(PiaveError, ValueError):
    """A signal is silent, empty or too short for the requested operation."""


class MalformedWavError(PiaveError, ValueError):
    """WAV file is truncated or carries an invalid header."""


class UnsupportedWavError(PiaveError, ValueError):
    """WAV file is valid but not 16-bit PCM mono."""


class GraphError(PiaveError, RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, repeated backward)."""


class ParameterError(PiaveError, ValueError):
    """Invalid operation parameter (stride, dilation, padding, region...)."""


class ConfigError(PiaveError, ValueError):
    """Invalid or inconsistent configuration."""


class TrainingDivergedError(PiaveError, RuntimeError):
    """Loss became non-finite during optimization."""
