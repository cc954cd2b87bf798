"""Multi-frame background/obstruction layer separation.

Coarse-to-fine alternation of motion decomposition and learned layer
reconstruction, with a self-contained reverse-mode autodiff engine and a
classical pyramidal optical-flow estimator.
"""

from .denseflow import LucasKanadeEstimator
from .estimator import ObstructionRemover
from .losses import LossConfig
from .metrics import evaluate_layers, lmse, ncc, psnr, ssim
from .pipeline import (DecompositionResult, Models, PipelineConfig, decompose,
                       online_finetune, train_flowinit, train_fusion)
from .synthgen import GeneratorConfig, SyntheticSample, generate_sequence

__all__ = [
    "LucasKanadeEstimator",
    "ObstructionRemover",
    "LossConfig",
    "psnr",
    "ssim",
    "ncc",
    "lmse",
    "evaluate_layers",
    "DecompositionResult",
    "Models",
    "PipelineConfig",
    "decompose",
    "online_finetune",
    "train_flowinit",
    "train_fusion",
    "GeneratorConfig",
    "SyntheticSample",
    "generate_sequence",
]

__version__ = "0.1.0"
