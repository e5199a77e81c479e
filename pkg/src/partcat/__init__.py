"""Desk-scale open-vocabulary part segmentation via disentangled
image-text cost aggregation."""

from .autodiff import Tensor, attention, conv2d, grad_check, matmul, softmax
from .data import SceneSpec, Sample, build_dataset, demo_scene_spec, demo_vocabulary
from .estimator import PartSegmenter
from .evaluation import MetricsReport, evaluate, harmonic_mean
from .losses import GroundTruth, LossWeights, total_loss
from .model import EmbeddingBundle, ModelConfig, forward, init_params
from .trainer import TrainConfig, run_ablation, train
from .vocab import Vocabulary, build_vocabulary, parse_class_name, pascal_part_116

__version__ = "0.1.0"

__all__ = [
    "Tensor", "attention", "conv2d", "grad_check", "matmul", "softmax",
    "SceneSpec", "Sample", "build_dataset", "demo_scene_spec", "demo_vocabulary",
    "PartSegmenter", "MetricsReport", "evaluate", "harmonic_mean",
    "GroundTruth", "LossWeights", "total_loss",
    "EmbeddingBundle", "ModelConfig", "forward", "init_params",
    "TrainConfig", "run_ablation", "train",
    "Vocabulary", "build_vocabulary", "parse_class_name", "pascal_part_116",
]
