"""Dataset distillation by progressive trajectory matching.

Trains throwaway "expert" networks on the real data, records their
parameter trajectories, then learns a tiny synthetic dataset whose
short student trajectories track the experts'.  A kernel overlap
penalty plus a staged retraining schedule keep the two halves of the
synthetic set from collapsing onto each other.
"""

from .exceptions import (
    ConfigError,
    DegenerateTrajectoryError,
    DimensionError,
    EngineError,
    FormatError,
    GraphError,
    IngestionError,
    InitError,
    LabelError,
    NumericError,
    PartitionError,
    PolicyError,
    ScheduleError,
    SpecError,
    StateError,
    TrainingError,
    UnrollError,
)
from .autodiff import Tensor, grad
from .models import Model, ModelSpec, build, param_distance_sq
from .augment import AugmentPolicy, apply
from .trajectories import TrajectoryBuffer, load_buffer, save_buffer, train_expert
from .data import (
    LabeledDataset,
    SyntheticDataset,
    init_synthetic,
    load_dataset,
    load_synthetic,
    save_synthetic,
)
from .evaluation import EvalResult, evaluate
from .engine import (
    DistillConfig,
    DistillSchedule,
    Distiller,
    SnapshotStore,
    gaussian_kernel,
    make_schedule,
    matching_loss,
    overlap_loss,
    student_unroll,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "grad",
    "Model",
    "ModelSpec",
    "build",
    "param_distance_sq",
    "AugmentPolicy",
    "apply",
    "TrajectoryBuffer",
    "train_expert",
    "save_buffer",
    "load_buffer",
    "LabeledDataset",
    "SyntheticDataset",
    "load_dataset",
    "init_synthetic",
    "save_synthetic",
    "load_synthetic",
    "EvalResult",
    "evaluate",
    "DistillConfig",
    "DistillSchedule",
    "Distiller",
    "SnapshotStore",
    "make_schedule",
    "matching_loss",
    "overlap_loss",
    "gaussian_kernel",
    "student_unroll",
    "EngineError",
    "ConfigError",
    "DimensionError",
    "GraphError",
    "LabelError",
    "NumericError",
    "SpecError",
    "TrainingError",
    "UnrollError",
    "DegenerateTrajectoryError",
    "ScheduleError",
    "StateError",
    "PolicyError",
    "PartitionError",
    "InitError",
    "FormatError",
    "IngestionError",
]
