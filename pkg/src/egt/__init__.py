"""Explanation-guided training for early-exit convolutional networks."""

from .data import Dataset, gen_synthetic, load_dataset, save_dataset
from .inference import ExitPolicy, infer_dataset, infer_sample
from .loss import LossConfig, total_loss
from .model import EGTModel, ModelConfig, load_checkpoint, model_new, save_checkpoint
from .tensor import Tensor, no_grad, precision, tensor_new
from .train import TrainConfig, lr_schedule, train

__all__ = [
    "Dataset", "EGTModel", "ExitPolicy", "LossConfig", "ModelConfig", "Tensor", "TrainConfig",
    "gen_synthetic", "infer_dataset", "infer_sample", "load_checkpoint", "load_dataset", "lr_schedule",
    "model_new", "no_grad", "precision", "save_checkpoint", "save_dataset", "tensor_new", "total_loss", "train",
]
