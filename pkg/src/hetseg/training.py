"""Toy-scale training with the soft Jaccard loss.

Only pointwise networks are trainable: 1x1 convolutions, activations,
bilinear upsampling and residual adds, all with hand-written backward
passes. Arithmetic is float64 so gradients can be checked against finite
differences.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError
from .metrics import j_mean, jaccard_grad, jaccard_loss
from .ops import upsample_matrix

DIFFERENTIABLE = ("conv", "act", "upsample", "add")
ACTS = ("relu6", "sigmoid", "identity")


@dataclass(frozen=True)
class ToyNetConfig:
    """A sequential pointwise net.

    ``layers`` holds ``(kind, arg)`` pairs: ``("conv", cout)`` is a 1x1 conv,
    ``("act", name)`` an activation, ``("upsample", factor)`` bilinear
    upsampling and ``("add", k)`` adds the output of layer ``k`` (``-1`` is the
    net input). The last layer must be a sigmoid so predictions lie in (0, 1).
    """

    layers: tuple = (("conv", 8), ("act", "relu6"), ("conv", 8), ("act", "relu6"),
                     ("conv", 1), ("act", "sigmoid"))
    in_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(tuple(layer) for layer in self.layers))
        if not self.layers or self.layers[-1] != ("act", "sigmoid"):
            raise ConfigError("toy net must end with a sigmoid activation")
        for i, (kind, arg) in enumerate(self.layers):
            if kind not in DIFFERENTIABLE:
                raise ConfigError(f"layer {i} ({kind!r}) has no gradient implementation")
            if kind == "act" and arg not in ACTS:
                raise ConfigError(f"layer {i}: unknown activation {arg!r}")
            if kind in ("conv", "upsample") and (int(arg) != arg or arg < 1):
                raise ConfigError(f"layer {i}: {kind} argument must be a positive integer")
            if kind == "add" and not -1 <= arg < i:
                raise ConfigError(f"layer {i}: add source {arg} must be an earlier layer")

    @property
    def upsample_factor(self) -> int:
        return math.prod(arg for kind, arg in self.layers if kind == "upsample")


class PointwiseNet:
    def __init__(self, cfg: ToyNetConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.params: dict[str, np.ndarray] = {}
        channels = [cfg.in_channels]
        c = cfg.in_channels
        for i, (kind, arg) in enumerate(cfg.layers):
            if kind == "conv":
                self.params[f"{i}.w"] = rng.normal(0.0, math.sqrt(2.0 / c), size=(arg, c))
                self.params[f"{i}.b"] = np.zeros(arg)
                c = arg
            elif kind == "add":
                if channels[arg + 1] != c:
                    raise ConfigError(f"layer {i}: add of {channels[arg + 1]} and {c} channels")
            channels.append(c)
        if c != 1:
            raise ConfigError(f"toy net must output one channel, got {c}")
        self._mats: dict[tuple[int, int], np.ndarray] = {}

    def _up(self, n: int, f: int) -> np.ndarray:
        key = (n, f)
        if key not in self._mats:
            self._mats[key] = upsample_matrix(n, f)
        return self._mats[key]

    def forward(self, x: np.ndarray, keep: bool = False):
        """``x`` is ``(b, h, w, c)``; returns ``(b, H, W)`` probabilities."""
        outs = [np.asarray(x, dtype=np.float64)]
        for i, (kind, arg) in enumerate(self.cfg.layers):
            h = outs[-1]
            if kind == "conv":
                y = h @ self.params[f"{i}.w"].T + self.params[f"{i}.b"]
            elif kind == "act":
                y = _act(h, arg)
            elif kind == "upsample":
                ah, aw = self._up(h.shape[1], arg), self._up(h.shape[2], arg)
                y = np.einsum("Hh,bhwc,Ww->bHWc", ah, h, aw)
            else:
                y = h + outs[arg + 1]
            outs.append(y)
        pred = outs[-1][..., 0]
        return (pred, outs) if keep else pred

    def backward(self, outs: list[np.ndarray], grad_pred: np.ndarray) -> dict[str, np.ndarray]:
        grads_out = [None] * len(outs)
        grads_out[-1] = grad_pred[..., None]
        pgrads = {}
        for i in range(len(self.cfg.layers) - 1, -1, -1):
            kind, arg = self.cfg.layers[i]
            dy = grads_out[i + 1]
            if dy is None:
                continue
            x = outs[i]
            if kind == "conv":
                w = self.params[f"{i}.w"]
                pgrads[f"{i}.w"] = np.einsum("bhwo,bhwi->oi", dy, x)
                pgrads[f"{i}.b"] = dy.sum(axis=(0, 1, 2))
                dx = dy @ w
            elif kind == "act":
                dx = dy * _act_grad(x, outs[i + 1], arg)
            elif kind == "upsample":
                ah, aw = self._up(x.shape[1], arg), self._up(x.shape[2], arg)
                dx = np.einsum("Hh,bHWc,Ww->bhwc", ah, dy, aw)
            else:
                dx = dy
                _accumulate(grads_out, arg + 1, dy)
            _accumulate(grads_out, i, dx)
        return pgrads


def _accumulate(grads: list, k: int, g: np.ndarray) -> None:
    grads[k] = g if grads[k] is None else grads[k] + g


def _act(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu6":
        return np.clip(x, 0.0, 6.0)
    if kind == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * x))
    return x


def _act_grad(x: np.ndarray, y: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu6":
        return ((x > 0.0) & (x < 6.0)).astype(np.float64)
    if kind == "sigmoid":
        return y * (1.0 - y)
    return np.ones_like(x)


def batch_loss(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-image Jaccard loss and its gradient with respect to ``pred``."""
    b = pred.shape[0]
    loss = sum(jaccard_loss(pred[k], gt[k]) for k in range(b)) / b
    grad = np.stack([jaccard_grad(pred[k], gt[k]) for k in range(b)]) / b
    return loss, grad


# ---------------------------------------------------------------------------
# synthetic data


def make_disks(n: int, size: int = 32, seed: int = 0, noise: float = 0.1,
               input_factor: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Bright noisy disks near the image centre.

    Returns images ``(n, size/f, size/f, 1)`` and binary masks ``(n, size, size)``;
    images are box-downsampled by ``input_factor`` for nets that upsample.
    """
    if size % input_factor:
        raise ConfigError(f"image size {size} not divisible by upsample factor {input_factor}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    images, masks = [], []
    for _ in range(n):
        cy, cx = size / 2 + rng.uniform(-size / 8, size / 8, 2)
        r = rng.uniform(size / 6, size / 3)
        m = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.float64)
        fg, bg = rng.uniform(0.7, 0.9), rng.uniform(0.1, 0.3)
        img = bg + (fg - bg) * m + rng.normal(0.0, noise, m.shape)
        if input_factor > 1:
            s = size // input_factor
            img = img.reshape(s, input_factor, s, input_factor).mean(axis=(1, 3))
        images.append(img[..., None])
        masks.append(m)
    return np.stack(images), np.stack(masks)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class ToyResult:
    miou: float
    losses: list[float] = field(default_factory=list)
    params: dict[str, np.ndarray] = field(default_factory=dict)


def fit_net(net: PointwiseNet, x: np.ndarray, y: np.ndarray, steps: int, lr: float) -> list[float]:
    """Full-batch gradient descent on the Jaccard loss; returns the loss per step."""
    losses = []
    for _ in range(steps):
        pred, outs = net.forward(x, keep=True)
        loss, grad = batch_loss(pred, y)
        losses.append(loss)
        if lr:
            for k, g in net.backward(outs, grad).items():
                net.params[k] -= lr * g
    return losses


def train_toy(cfg: ToyNetConfig | None = None, steps: int = 200, lr: float = 2.0, n_train: int = 32,
              n_test: int = 16, size: int = 32, seed: int = 0) -> ToyResult:
    """Train a pointwise net on synthetic disks and report held-out mIoU."""
    cfg = cfg or ToyNetConfig(seed=seed)
    net = PointwiseNet(cfg)
    f = cfg.upsample_factor
    x, y = make_disks(n_train, size, seed=seed, input_factor=f)
    xt, yt = make_disks(n_test, size, seed=seed + 10_000, input_factor=f)
    losses = fit_net(net, x, y, steps, lr)
    pred = net.forward(xt)
    return ToyResult(j_mean(zip(pred, yt)), losses, {k: v.copy() for k, v in net.params.items()})
