"""Label-guided self-distillation for a small anchor-free detector.

A student detector trains jointly with an on-the-fly instructive-knowledge
generator built from ground-truth labels and the student's own appearance
features; no pretrained teacher is involved and everything except the
student is dropped at inference time.
"""

from .autograd import Tensor, grad_check, instance_norm, softmax_scaled
from .config import RunConfig, load_config
from .data import Annotation, GeneratorConfig, Scene, generate_scene, rasterize_mask
from .detector import DetectorConfig
from .evaluate import EvalResult, compare_runs, evaluate_checkpoint
from .params import ParameterStore, sgd_update
from .train import Model, TrainConfig, run_training

__all__ = [
    "Annotation",
    "DetectorConfig",
    "EvalResult",
    "GeneratorConfig",
    "Model",
    "ParameterStore",
    "RunConfig",
    "Scene",
    "Tensor",
    "TrainConfig",
    "compare_runs",
    "evaluate_checkpoint",
    "generate_scene",
    "grad_check",
    "instance_norm",
    "load_config",
    "rasterize_mask",
    "run_training",
    "sgd_update",
    "softmax_scaled",
]

__version__ = "0.1.0"
