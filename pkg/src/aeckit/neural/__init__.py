from .io import WeightFileError, load_weights, save_weights
from .model import (
    ModelConfig,
    ModelWeights,
    apply_mask,
    assemble_features,
    backprop,
    enhance,
    gru_forward,
    loss_gradient,
    mse_loss,
)
from .optim import AdamState, TrainConfig, adam_step
from .train import Example, TrainResult, prepare_example, train

__all__ = [
    "AdamState", "Example", "ModelConfig", "ModelWeights", "TrainConfig", "TrainResult",
    "WeightFileError", "adam_step", "apply_mask", "assemble_features", "backprop", "enhance",
    "gru_forward", "load_weights", "loss_gradient", "mse_loss", "prepare_example", "save_weights",
    "train",
]
