"""scikit-learn style wrappers around the model zoo and the toy trainer.

``EdgeSegmenter`` materialises a seeded network on ``fit`` (there is no
full-scale training here) and segments batches of 8-bit images.
``ToySegmenter`` actually learns: it trains a pointwise net with the soft
Jaccard loss.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .analysis import analyze
from .exceptions import ConfigError
from .inference import segment
from .metrics import j_mean
from .training import PointwiseNet, ToyNetConfig, fit_net
from .zoo import ModelConfig, build_model


def check_images(X, *, channels: tuple[int, ...] = (1, 3)) -> np.ndarray:
    """Validate an image batch and return it as ``(n, h, w, c)``.

    A single ``(h, w)`` image is promoted to a batch of one. A 3-D array whose
    last axis is an allowed channel count is one ``(h, w, c)`` image;
    otherwise it is an ``(n, h, w)`` single-channel batch.
    """
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=None, ensure_all_finite=True)
    if X.ndim == 2:
        X = X[None, ..., None]
    elif X.ndim == 3:
        X = X[None] if X.shape[-1] in channels else X[..., None]
    if X.ndim != 4 or X.shape[-1] not in channels:
        raise ValueError(f"expected images shaped (n, h, w, c) with c in {channels}, got {X.shape}")
    return X


def check_masks(y, n: int) -> np.ndarray:
    y = check_array(y, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if y.ndim == 2:
        y = y[None]
    if y.ndim == 4 and y.shape[-1] == 1:
        y = y[..., 0]
    if y.ndim != 3 or y.shape[0] != n:
        raise ValueError(f"expected {n} masks shaped (n, h, w), got {y.shape}")
    if y.min() < 0 or y.max() > 1:
        raise ValueError("mask values must lie in [0, 1]")
    return y


class EdgeSegmenter(BaseEstimator):
    """Encoder-decoder segmenter over 8-bit grey or RGB images."""

    def __init__(self, resolution=512, width_multiplier=1.0, decoder="mlp", conv_type="group",
                 group_size=16, se_reduction=4, seed=0, mlp_depth=2, threshold=0.5,
                 layout="reference"):
        self.resolution = resolution
        self.width_multiplier = width_multiplier
        self.decoder = decoder
        self.conv_type = conv_type
        self.group_size = group_size
        self.se_reduction = se_reduction
        self.seed = seed
        self.mlp_depth = mlp_depth
        self.threshold = threshold
        self.layout = layout

    def _config(self) -> ModelConfig:
        return ModelConfig(self.resolution, self.width_multiplier, self.decoder, self.conv_type,
                           self.group_size, self.se_reduction, self.seed, self.mlp_depth)

    def fit(self, X=None, y=None):
        """Build the network and its seeded weights. ``X`` and ``y`` are ignored."""
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        self.config_ = self._config()
        graph = build_model(self.config_)
        self.weights_ = dict(graph.weights)
        cost = analyze(graph, self.config_.resolution)
        self.n_params_, self.n_macs_ = cost.params, cost.macs
        return self

    @classmethod
    def from_config(cls, cfg: ModelConfig, **kwargs) -> "EdgeSegmenter":
        return cls(cfg.resolution, cfg.width_multiplier, cfg.decoder.value, cfg.conv_type.value,
                   cfg.group_size, cfg.se_reduction, cfg.seed, cfg.mlp_depth, **kwargs)

    def predict_proba(self, X) -> np.ndarray:
        """Foreground probabilities ``(n, h, w)``; any size divisible by 32 works."""
        check_is_fitted(self, "weights_")
        X = check_images(X)
        if X.dtype != np.uint8:
            if X.min() < 0 or X.max() > 255:
                raise ValueError("image values must lie in [0, 255]")
            X = X.astype(np.uint8)
        imgs = [x[..., 0] if x.shape[-1] == 1 else x for x in X]
        return np.stack([segment(self.config_, self.weights_, img, self.layout) for img in imgs])

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X) >= self.threshold

    def score(self, X, y) -> float:
        """Mean IoU of the thresholded predictions against ``y``."""
        proba = self.predict_proba(X)
        y = check_masks(y, len(proba))
        return j_mean(zip(proba, y), self.threshold)


class ToySegmenter(BaseEstimator):
    """A small pointwise net trained with the soft Jaccard loss."""

    def __init__(self, layers=None, steps=200, learning_rate=2.0, seed=0, threshold=0.5):
        self.layers = layers
        self.steps = steps
        self.learning_rate = learning_rate
        self.seed = seed
        self.threshold = threshold

    def fit(self, X, y):
        X = check_images(X, channels=(1, 2, 3, 4))
        y = check_masks(y, len(X))
        if self.steps < 1 or not self.learning_rate > 0:
            raise ConfigError("steps must be >= 1 and learning_rate > 0")
        kwargs = {} if self.layers is None else {"layers": self.layers}
        cfg = ToyNetConfig(in_channels=X.shape[-1], seed=self.seed, **kwargs)
        f = cfg.upsample_factor
        if y.shape[1:] != (X.shape[1] * f, X.shape[2] * f):
            raise ValueError(f"masks {y.shape[1:]} do not match images {X.shape[1:3]} upsampled x{f}")
        self.net_ = PointwiseNet(cfg)
        self.losses_ = fit_net(self.net_, X.astype(np.float64), y, self.steps, self.learning_rate)
        self.n_features_in_ = X.shape[-1]
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_images(X, channels=(self.n_features_in_,))
        return self.net_.forward(X.astype(np.float64))

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X) >= self.threshold

    def score(self, X, y) -> float:
        proba = self.predict_proba(X)
        return j_mean(zip(proba, check_masks(y, len(proba))), self.threshold)
