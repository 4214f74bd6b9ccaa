"""Exception types raised across the package."""


class BDCError(Exception):
    """Base class for all library errors."""


class NonBinaryValue(BDCError, ValueError):
    pass


class LengthMismatch(BDCError, ValueError):
    pass


class ShapeMismatch(BDCError, ValueError):
    pass


class ChannelMismatch(ShapeMismatch):
    pass


class GeometryMismatch(ShapeMismatch):
    pass


class IndivisibleShape(ShapeMismatch):
    pass


class StackLengthMismatch(BDCError, ValueError):
    pass


class KernelNotOne(BDCError, ValueError):
    pass


class NonPositiveAlpha(BDCError, ValueError):
    pass


class EmptyTensor(BDCError, ValueError):
    pass


class TapeMismatch(BDCError, RuntimeError):
    pass


class InvalidKernel(BDCError, ValueError):
    pass


class GridTooSmall(BDCError, ValueError):
    pass


class ChannelPlanMismatch(BDCError, ValueError):
    pass


class LabelOutOfRange(BDCError, ValueError):
    pass


class ConfigError(BDCError, ValueError):
    """Malformed or unknown configuration entries."""


class CheckpointError(BDCError, ValueError):
    """Corrupted or unreadable checkpoint file."""
