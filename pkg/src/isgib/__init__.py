"""Individual and structural graph information bottlenecks for OOD generalization."""

from .graph import (
    DatasetSplit, Graph, ShiftSpec, ego_graph, inject_noise, load_dataset,
    make_shift_benchmark, save_dataset,
)
from .models import EncoderConfig, ISGIBModel
from .objective import EnvironmentBatch, LossBreakdown, total_loss
from .relations import relation_matrix
from .trainer import RunConfig, RunResult, run_matrix, train, train_erm

__version__ = "0.1.0"

__all__ = [
    "DatasetSplit", "EncoderConfig", "EnvironmentBatch", "Graph", "ISGIBModel", "LossBreakdown",
    "RunConfig", "RunResult", "ShiftSpec", "ego_graph", "inject_noise", "load_dataset",
    "make_shift_benchmark", "relation_matrix", "run_matrix", "save_dataset", "total_loss",
    "train", "train_erm",
]
