"""Exception types raised by the detection/pose pipeline."""


class DegenerateInput(ValueError):
    """Point sets too small or too degenerate for a rigid alignment."""


class EmptyCloud(ValueError):
    """An operation that needs at least one valid point got none."""


class EmptyMask(ValueError):
    """A template extraction mask contains no pixels."""


class TooFewFeatures(ValueError):
    """A modality yielded fewer features than the configured minimum."""


class VersionMismatch(RuntimeError):
    """Template store file was written by an incompatible format version."""


class CorruptFile(RuntimeError):
    """Template store file failed its checksum or is truncated."""


class EmptySegment(RuntimeError):
    """A projected mask covers no valid scene depth."""


class DegenerateCluster(RuntimeError):
    """Orientation cluster whose quaternions cannot be sign-aligned."""


class ConfigError(ValueError):
    """Pipeline configuration file is invalid or references missing paths."""
