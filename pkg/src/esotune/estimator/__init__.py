"""Neural performance estimator: architecture, training, inference."""

from .model import (
    EstimatorConfig,
    EstimatorInput,
    EstimatorModel,
    build_model,
    embed_context,
    forward,
    load_model,
    predict_criteria,
    predict_grid,
    save_model,
)
from .training import (
    TrainConfig,
    gradient_check,
    loss,
    mape,
    save_history,
    tensors_from_records,
    train,
)

__all__ = [
    "EstimatorConfig",
    "EstimatorInput",
    "EstimatorModel",
    "TrainConfig",
    "build_model",
    "embed_context",
    "forward",
    "gradient_check",
    "load_model",
    "loss",
    "mape",
    "predict_criteria",
    "predict_grid",
    "save_history",
    "save_model",
    "tensors_from_records",
    "train",
]
