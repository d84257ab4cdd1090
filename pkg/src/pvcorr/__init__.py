"""Scene flow between point clouds with truncated point-voxel correlation and a recurrent update."""

from .estimator import SceneFlowEstimator
from .metrics import FlowMetrics, evaluate
from .network import ModelConfig, ModelParams, iterate, refine
from .synthetic import SceneSample, gen_dataset, gen_synthetic
from .training import TrainConfig, predict, train_main, train_refine

__version__ = "0.1.0"

__all__ = [
    "FlowMetrics",
    "ModelConfig",
    "ModelParams",
    "SceneFlowEstimator",
    "SceneSample",
    "TrainConfig",
    "evaluate",
    "gen_dataset",
    "gen_synthetic",
    "iterate",
    "predict",
    "refine",
    "train_main",
    "train_refine",
]
