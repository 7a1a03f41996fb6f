"""Exception types shared across the toolkit.

Every error raised by the library derives from :class:`DistillADError` so
callers can catch one base class. The CLI maps subtrees onto exit codes
(config -> 2, data -> 3, device -> 4).
"""

from __future__ import annotations


class DistillADError(Exception):
    """Base class for all library errors."""


class ConfigError(DistillADError):
    """Invalid configuration value, file, or override."""


class DataError(DistillADError):
    """Base class for dataset and input-decoding problems."""


class LayoutError(DataError):
    """Dataset directory tree does not follow the MVTec convention."""


class MaskMissingError(DataError):
    """A defective test image has no ground-truth mask."""


class DecodeError(DataError):
    """An image or mask file could not be decoded."""


class WeightsError(DataError):
    """Backbone weights missing, corrupt, or inconsistent with a checkpoint."""


class ShapeError(DistillADError):
    """Tensor shapes disagree where they must match."""


class ArityError(DistillADError):
    """Wrong number of inputs (e.g. not exactly six distillation sites)."""


class PairingError(DistillADError):
    """Anomaly maps paired for summation do not share a resolution."""


class RangeError(DistillADError):
    """Values fall outside a required interval (e.g. probabilities)."""


class DimensionError(DistillADError):
    """Non-positive or otherwise unusable spatial dimensions."""


class ParameterError(DistillADError):
    """A numeric parameter is outside its allowed range."""


class DegenerateMaskError(DistillADError):
    """Pseudo-anomaly mask generation exhausted its retry budget."""


class DegenerateLabelsError(DistillADError):
    """A metric needs both classes but got only one."""


class DegenerateGroundTruthError(DistillADError):
    """PRO evaluation needs at least one anomalous region in the ground truth."""


class StageError(DistillADError):
    """Checkpoint stage is insufficient for the requested operation."""


class DeviceError(DistillADError):
    """Requested compute device is unavailable."""
