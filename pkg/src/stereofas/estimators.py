"""scikit-learn style facade over the two-stage network.

``X`` is always an ``(N, 2, H, W)`` stack of rectified left/right grayscale
views in [0, 1]; ``y`` uses 1 for a real face and 0 for a plane attack.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .config import config_from_dict
from .data.synth import StereoDataset
from .training import StereoSpoofNet, predict, train_stage1, train_stage2


def _check_views(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4 or X.shape[1] != 2:
        raise ValueError(f"X must have shape (N, 2, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("X is empty")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    return X


class StereoSpoofClassifier(ClassifierMixin, BaseEstimator):
    """Disparity network plus confidence map generator, trained in two stages.

    ``fit`` needs a per-pixel teacher depth map (values in [0, 1]) for each
    sample; it drives the relative-pair supervision of the disparity stage.
    """

    def __init__(self, stage1_steps: int = 400, stage2_steps: int = 600, lr: float = 1e-3, batch_size: int = 8,
                 channels: int = 32, n_blocks: int = 4, n_heads: int = 8, cmg_variant: str = "gated",
                 no_head_split: bool = False, no_token_resampling: bool = False,
                 disable_losses: Sequence[str] = (), seed: int = 0):
        self.stage1_steps = stage1_steps
        self.stage2_steps = stage2_steps
        self.lr = lr
        self.batch_size = batch_size
        self.channels = channels
        self.n_blocks = n_blocks
        self.n_heads = n_heads
        self.cmg_variant = cmg_variant
        self.no_head_split = no_head_split
        self.no_token_resampling = no_token_resampling
        self.disable_losses = disable_losses
        self.seed = seed

    def _config(self):
        return config_from_dict({
            "model": {"channels": self.channels, "n_blocks": self.n_blocks, "n_heads": self.n_heads},
            "stage1": {"steps": self.stage1_steps, "lr": self.lr, "batch_size": self.batch_size},
            "stage2": {"steps": self.stage2_steps, "lr": self.lr, "batch_size": self.batch_size},
            "ablation": {
                "disable_losses": list(self.disable_losses),
                "no_head_split": self.no_head_split,
                "no_token_resampling": self.no_token_resampling,
                "cmg_variant": self.cmg_variant,
            },
            "seed": self.seed,
        })

    def fit(self, X, y, teacher_depth=None):
        X = _check_views(X)
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ValueError(f"y must have shape ({len(X)},), got {y.shape}")
        if not np.isin(y, (0, 1)).all() or len(np.unique(y)) < 2:
            raise ValueError("y must contain both labels 0 and 1 and nothing else")
        if teacher_depth is None:
            raise ValueError("teacher_depth is required: one (H, W) map per sample")
        teacher = np.asarray(teacher_depth, dtype=np.float32)
        if teacher.shape != (len(X),) + X.shape[2:]:
            raise ValueError(f"teacher_depth must have shape {(len(X),) + X.shape[2:]}, got {teacher.shape}")
        cfg = self._config()
        data = StereoDataset([str(i) for i in range(len(X))], X, y.astype(np.int64), teacher)
        net = StereoSpoofNet(cfg)
        self.stage1_history_ = train_stage1(net, data, cfg)
        self.stage2_history_ = train_stage2(net, data, cfg)
        self.net_ = net
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _predict(self, X):
        check_is_fitted(self, "net_")
        return predict(self.net_, _check_views(X))

    def decision_function(self, X) -> np.ndarray:
        s = np.clip(self._predict(X).scores, 1e-7, 1 - 1e-7)
        return np.log(s) - np.log1p(-s)

    def predict_proba(self, X) -> np.ndarray:
        s = self._predict(X).scores
        return np.stack([1.0 - s, s], axis=1)

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= threshold).astype(np.int64)

    def predict_disparity(self, X, refined: bool = True) -> np.ndarray:
        """(N, H, W) disparity maps: the refined (0, 1) map or the pixel-scale one."""
        pred = self._predict(X)
        return pred.refined if refined else pred.pixels

    def confidence_maps(self, X) -> np.ndarray:
        """(N, 2, H, W): channel 0 real, channel 1 attack."""
        return self._predict(X).confidence
