"""Scikit-learn style front door.

``ObstructionRemover.fit`` runs the two-stage training on a list of
synthetic samples; ``transform``/``predict`` decompose sequences into
background layers.  Hyper-parameters follow the sklearn convention
(stored verbatim in ``__init__``, resolved at fit time), so the
estimator composes with ``get_params`` / ``set_params`` and cloning.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .losses import LossConfig
from .pipeline import (DecompositionResult, Models, PipelineConfig, decompose,
                       online_finetune, train_flowinit, train_fusion)

__all__ = ["ObstructionRemover"]


class ObstructionRemover(BaseEstimator):
    """Separate a short image sequence into background and obstruction layers.

    Parameters mirror :class:`layersplit.pipeline.PipelineConfig`.  ``X``
    for :meth:`fit` is a list of :class:`layersplit.synthgen.SyntheticSample`;
    ``X`` for :meth:`transform` is a list of sequences, each a list of
    ``frames`` images.
    """

    def __init__(self, mode="reflection", frames=5, levels=4, keyframe=None,
                 feature_width=16, hidden=32, stage1_iterations=2000,
                 stage2_iterations=2000, batch_size=2, learning_rate=1e-4,
                 online_iterations=200, online_learning_rate=1e-4,
                 online_flow_stride=1, seed=0):
        self.mode = mode
        self.frames = frames
        self.levels = levels
        self.keyframe = keyframe
        self.feature_width = feature_width
        self.hidden = hidden
        self.stage1_iterations = stage1_iterations
        self.stage2_iterations = stage2_iterations
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.online_iterations = online_iterations
        self.online_learning_rate = online_learning_rate
        self.online_flow_stride = online_flow_stride
        self.seed = seed

    def _make_config(self) -> PipelineConfig:
        return PipelineConfig(
            frames=self.frames, levels=self.levels, keyframe=self.keyframe,
            mode=self.mode, feature_width=self.feature_width, hidden=self.hidden,
            stage1_iterations=self.stage1_iterations,
            stage2_iterations=self.stage2_iterations,
            batch_size=self.batch_size, learning_rate=self.learning_rate,
            online_iterations=self.online_iterations,
            online_learning_rate=self.online_learning_rate,
            online_flow_stride=self.online_flow_stride, seed=self.seed)

    def fit(self, X, y=None):
        if not X:
            raise ValueError("fit requires a non-empty list of synthetic samples")
        self.config_ = self._make_config()
        self.models_ = Models(self.config_)
        self.stage1_trace_ = train_flowinit(list(X), self.models_, self.config_)
        self.stage2_trace_ = train_fusion(list(X), self.models_, self.config_)
        return self

    def decompose(self, frames) -> DecompositionResult:
        """Full decomposition of one sequence."""
        check_is_fitted(self, "models_")
        return decompose(list(frames), self.models_, self.config_)

    def transform(self, X):
        """Recovered background layer for each sequence in ``X``."""
        return [self.decompose(seq).background for seq in X]

    def predict(self, X):
        return self.transform(X)

    def finetune(self, frames, loss_cfg: LossConfig = LossConfig()) -> DecompositionResult:
        """Online unsupervised fine-tuning on a single test sequence."""
        check_is_fitted(self, "models_")
        _, result = online_finetune(list(frames), self.models_, self.config_, loss_cfg)
        return result
