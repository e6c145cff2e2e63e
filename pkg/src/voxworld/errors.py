"""Exception types shared across the package."""


class VoxworldError(Exception):
    """Base class for all voxworld errors."""


class DegenerateDepth(VoxworldError):
    """Point is closer than the camera near plane; projection undefined."""


class NonInvertibleCovariance(VoxworldError):
    """Projected 2x2 covariance is numerically singular after flooring."""


class DegenerateVariance(VoxworldError):
    """Depth map is constant on the valid mask; correlation undefined."""


class EmptyMask(VoxworldError):
    """No valid pixel survives masking."""


class InvalidClassSet(VoxworldError):
    """Class set contains the reserved air class or out-of-range ids."""


class DimensionMismatch(VoxworldError):
    """Grid or map shapes disagree."""


class LengthMismatch(VoxworldError):
    """Trajectory lengths disagree or are too short for the horizon marks."""


class ShapeMismatch(VoxworldError):
    """Tensor shape incompatible with the network layout."""


class CorruptHeader(VoxworldError):
    """File header failed magic/version/field validation."""


class TruncatedPayload(VoxworldError):
    """File ended before the declared payload was read."""


class EmptyDataset(VoxworldError):
    """Training requires at least one sample."""


class ContextOverflow(VoxworldError):
    """History longer than the temporal context window."""


class ConfigError(VoxworldError):
    """Configuration is inconsistent or geometrically impossible."""


class UntrainedTokenizer(VoxworldError):
    """Operation requires a trained occupancy tokenizer."""
