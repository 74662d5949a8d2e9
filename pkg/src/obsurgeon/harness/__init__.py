from .data import Dataset, DataSpec, make_dataset
from .model import ModelConfig, ShapeError, ToyModel, drop_layers, load_model, save_model
from .quant import QuantConfig, fake_quant_finetune, fake_quantize, quant_scale
from .training import (
    SGD,
    DivergenceError,
    KDConfig,
    Trainer,
    evaluate,
    gradient_stream,
    loss_and_grad,
    loss_and_grads,
)

__all__ = [
    "Dataset", "DataSpec", "make_dataset",
    "ModelConfig", "ShapeError", "ToyModel", "drop_layers", "load_model", "save_model",
    "QuantConfig", "fake_quant_finetune", "fake_quantize", "quant_scale",
    "SGD", "DivergenceError", "KDConfig", "Trainer", "evaluate", "gradient_stream",
    "loss_and_grad", "loss_and_grads",
]
