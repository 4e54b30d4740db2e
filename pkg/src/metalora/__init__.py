"""Linear Meta-LoRA retraining: task model, objectives, solvers and landscape tools."""
from .errors import (
    ConfigError,
    DimensionError,
    GenerationError,
    InfeasibleNetError,
    MetaLoraError,
    PreconditionError,
    SingularSystemError,
    TaskIndexError,
)
from .objectives import Adapter, MetaGradient, MetaParams
from .task_model import GroundTruth, RngSpec, TaskDataset, generate_ground_truth, sample_task
from .solvers import TrainConfig, TrainTrace

__version__ = "0.1.0"
