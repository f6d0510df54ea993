"""Error taxonomy shared across the package.

Validation problems (bad config, bad file, bad arguments) are kept apart
from runtime failures (divergence, numerical blow-ups) so the CLI can map
them to distinct exit codes.
"""


class EngineError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(EngineError):
    """Run configuration is malformed, incomplete, or inconsistent."""


class DimensionError(EngineError):
    """Shapes, ranks, or lengths do not line up for an operation."""


class GraphError(EngineError):
    """A differentiation target is not connected to the output graph."""


class LabelError(EngineError):
    """A class label is outside the valid range for the logits."""


class NumericError(EngineError):
    """An operation produced a non-finite value."""


class SpecError(EngineError):
    """A model description names an unknown or unbuildable architecture."""


class TrainingError(EngineError):
    """Optimization diverged; message identifies where."""


class UnrollError(EngineError):
    """A student update produced a non-finite loss; message names the step."""


class DegenerateTrajectoryError(EngineError):
    """Expert start and target parameters coincide, so the matching loss
    normalizer is zero."""


class ScheduleError(EngineError):
    """Step schedule or retraining points cannot be constructed as asked."""


class StateError(EngineError):
    """A stateful container was used out of order (empty buffer, snapshot
    overwrite, resume mismatch)."""


class PolicyError(EngineError):
    """Augmentation policy names an unknown transform or an invalid range."""


class PartitionError(EngineError):
    """Synthetic set sizes or subset masks violate the required partition."""


class InitError(EngineError):
    """Synthetic initialization cannot be satisfied by the real dataset."""


class FormatError(EngineError):
    """A binary artifact file is corrupt, truncated, or the wrong version."""


class IngestionError(EngineError):
    """A dataset file cannot be parsed; message carries the byte offset."""
