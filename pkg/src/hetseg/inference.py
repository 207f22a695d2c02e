"""Image-level inference: 8-bit image in, foreground probabilities out."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .exceptions import ConfigError, SpecError
from .graph import LayoutProfile, execute, fuse_mrt, plan_layouts
from .zoo import ModelConfig, build_model

STRIDE = 32


def prepare_image(img, cfg: ModelConfig) -> np.ndarray:
    """``(h, w)`` grey or ``(h, w, 3)`` colour 8-bit image to a normalised ``(1, h, w, 3)`` batch."""
    a = np.asarray(img)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ConfigError(f"expected a grey or RGB image, got shape {a.shape}")
    h, w = a.shape[:2]
    if h % STRIDE or w % STRIDE:
        raise ConfigError(f"image size {h}x{w} is not divisible by {STRIDE}")
    x = (a.astype(np.float32) - np.float32(cfg.NORM_MEAN)) / np.float32(cfg.NORM_STD)
    return x[None]


def segment(cfg: ModelConfig, weights: Mapping[str, np.ndarray], img, layout="reference",
            fuse: bool = False) -> np.ndarray:
    """Foreground probability map ``(h, w)`` for one image, built at the image's own size."""
    x = prepare_image(img, cfg)
    g = build_model(cfg, input_hw=x.shape[1:3], with_weights=False)
    needed = {w for node in g.node_list() for w in node.weights}
    missing = sorted(needed - set(weights))
    if missing:
        raise SpecError(f"weights do not match the model config: {len(missing)} missing, e.g. {missing[0]!r}")
    for name in needed:
        g.set_weight(name, weights[name])
    if fuse:
        g = fuse_mrt(g)
    out = execute(g, {g.inputs[0]: x}, plan_layouts(g, LayoutProfile(layout)))
    return out["mask"][0, :, :, 0]
