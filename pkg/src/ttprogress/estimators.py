"""Scikit-learn flavored wrappers so the pipeline composes with the usual
fit/predict tooling. X is a list of TrajectoryRecord; predict returns one
per-frame progress array per trajectory.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .adaptation import AdaptConfig, run_ttt
from .evaluation import clip_similarity, spearman_voc, train_clipft, vlmrm_projection
from .model import MetaParams
from .training import TrainConfig, train

__all__ = [
    "TTTProgressEstimator",
    "ClipSimilarityEstimator",
    "VlmRmEstimator",
    "ClipFtEstimator",
]


class _ProgressEstimatorBase(BaseEstimator):
    def predict(self, X):
        return [self.predict_trajectory(traj) for traj in X]

    def score(self, X, y=None):
        """Mean VOC over the given trajectories."""
        vocs = [spearman_voc(p) for p in self.predict(X)]
        return float(np.mean(vocs))


class TTTProgressEstimator(_ProgressEstimatorBase):
    """Meta-learned progress estimator with test-time adaptation.

    fit() runs the meta-training loop; predict adapts online with the
    selected memory variant.
    """

    def __init__(self, variant="IM", eta=None, k=None, t_ep=1,
                 lambda_self=0.5, w_tr=8, stride=4, b=8, lr=1e-4,
                 weight_decay=1e-4, epochs=5, batch_size=32, dprime=64,
                 meta_grad_mode="exact", seed=0):
        self.variant = variant
        self.eta = eta
        self.k = k
        self.t_ep = t_ep
        self.lambda_self = lambda_self
        self.w_tr = w_tr
        self.stride = stride
        self.b = b
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.dprime = dprime
        self.meta_grad_mode = meta_grad_mode
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lambda_self=self.lambda_self, w_tr=self.w_tr, stride=self.stride,
            b=self.b, lr=self.lr, weight_decay=self.weight_decay,
            epochs=self.epochs, batch_size=self.batch_size, dprime=self.dprime,
            meta_grad_mode=self.meta_grad_mode, seed=self.seed, eta_inner=0.1,
            t_ep_inner=self.t_ep,
        )

    def fit(self, X, y=None):
        self.meta_params_, self.train_log_ = train(X, self._train_config())
        return self

    def set_meta_params(self, meta: MetaParams):
        """Attach an already-trained checkpoint instead of fitting."""
        self.meta_params_ = meta
        self.train_log_ = []
        return self

    def _adapt_config(self) -> AdaptConfig:
        return AdaptConfig(variant=self.variant, eta=self.eta, k=self.k, t_ep=self.t_ep)

    def predict_trajectory(self, traj) -> np.ndarray:
        if not hasattr(self, "meta_params_"):
            raise NotFittedError("call fit() or set_meta_params() first")
        return run_ttt(traj, self.meta_params_, self._adapt_config())


class ClipSimilarityEstimator(_ProgressEstimatorBase):
    """Zero-shot cosine similarity between frame and goal embeddings."""

    def fit(self, X=None, y=None):
        return self

    def predict_trajectory(self, traj) -> np.ndarray:
        return clip_similarity(traj)


class VlmRmEstimator(_ProgressEstimatorBase):
    """Projection along the reference-prompt-to-goal direction."""

    def __init__(self, baseline_embedding=None):
        self.baseline_embedding = baseline_embedding

    def fit(self, X=None, y=None):
        if self.baseline_embedding is None:
            raise ValueError("baseline_embedding is required")
        return self

    def predict_trajectory(self, traj) -> np.ndarray:
        if self.baseline_embedding is None:
            raise NotFittedError("baseline_embedding is required")
        return vlmrm_projection(traj, self.baseline_embedding)


class ClipFtEstimator(_ProgressEstimatorBase):
    """Supervised frozen-feature regressor (no adaptation path)."""

    def __init__(self, lr=1e-4, weight_decay=1e-4, epochs=5, batch_size=32,
                 dprime=64, seed=0):
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.dprime = dprime
        self.seed = seed

    def fit(self, X, y=None):
        cfg = TrainConfig(lr=self.lr, weight_decay=self.weight_decay,
                          epochs=self.epochs, batch_size=self.batch_size,
                          dprime=self.dprime, seed=self.seed)
        self.model_, self.train_log_ = train_clipft(X, cfg)
        return self

    def predict_trajectory(self, traj) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit() first")
        return self.model_.predict_trajectory(traj)
