from .layers import BatchNorm, Conv2D, Dense, ReLU, mse_loss
from .model import (BRANCH_ORDER, Branch, Model, NetworkConfig, ResidualUnit,
                    forward, param_count)
from .optim import adam_step
from .checkpoint import (load_checkpoint, load_checkpoint_file, save_checkpoint,
                         save_checkpoint_file)
from .gradcheck import check_gradient, max_relative_error, numerical_gradient

__all__ = [
    "BatchNorm", "Conv2D", "Dense", "ReLU", "mse_loss",
    "BRANCH_ORDER", "Branch", "Model", "NetworkConfig", "ResidualUnit",
    "forward", "param_count", "adam_step",
    "load_checkpoint", "load_checkpoint_file", "save_checkpoint",
    "save_checkpoint_file",
    "check_gradient", "max_relative_error", "numerical_gradient",
]
