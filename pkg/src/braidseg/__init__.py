"""braidseg: a two-branch segmentation network with braided feature coupling.

A compact transformer encoder (the general-purpose branch) and a residual
squeeze-excitation CNN (the domain branch) exchange features through
zero-initialized coupling modules, then a prompt-conditioned decoder turns
the fused map into a mask. Everything runs on a small reverse-mode autodiff
core over numpy; no deep-learning framework is involved.
"""

from .tensor import Tensor
from .model import BraidNet, ModelConfig, build_model
from .fusion import CycleError, FusionPlan, build_plan
from .train import NumericError, TrainConfig, seg_loss, sgd_step, train
from .evaluate import EvalReport, dice, evaluate, predict_mask
from .data import DataError, generate_dataset, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "BraidNet",
    "ModelConfig",
    "build_model",
    "CycleError",
    "FusionPlan",
    "build_plan",
    "NumericError",
    "TrainConfig",
    "seg_loss",
    "sgd_step",
    "train",
    "EvalReport",
    "dice",
    "evaluate",
    "predict_mask",
    "DataError",
    "generate_dataset",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]
