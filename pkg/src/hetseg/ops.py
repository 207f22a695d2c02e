"""Reference CNN operators.

Kernels come in two flavours: ``*_nhwc`` functions work on plain float32
``(n, h, w, c)`` arrays and are what the graph executor calls, and the
un-suffixed wrappers take and return :class:`~hetseg.tensor.LogicalTensor`
objects. Wrappers read through the logical view, so results never depend on
the input layout.

Convolution accumulates one input channel and one kernel tap at a time in a
fixed order. Every output channel is computed by the same sequence of
elementwise float32 operations regardless of how many output channels are
computed together, which is what keeps multi-output fusion bit-exact.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .exceptions import SpecError
from .tensor import DTYPE, Layout, LogicalTensor, from_numpy


class Padding(enum.Enum):
    SAME = "same"
    VALID = "valid"


class ActKind(enum.Enum):
    RELU6 = "relu6"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: Padding = Padding.SAME
    groups: int = 1
    cin: int = 1
    cout: int = 1
    has_bias: bool = True

    def __post_init__(self):
        kh, kw = self.kernel
        sh, sw = self.stride
        if min(kh, kw, sh, sw) < 1:
            raise SpecError(f"kernel {self.kernel} and stride {self.stride} must be positive")
        if self.groups < 1 or self.cin < 1 or self.cout < 1:
            raise SpecError("groups, cin and cout must be positive")
        if self.cin % self.groups or self.cout % self.groups:
            raise SpecError(
                f"groups={self.groups} must divide cin={self.cin} and cout={self.cout}"
            )

    @classmethod
    def square(cls, k: int, cin: int, cout: int, stride: int = 1, groups: int = 1,
               padding: Padding = Padding.SAME, has_bias: bool = True) -> "ConvSpec":
        return cls((k, k), (stride, stride), padding, groups, cin, cout, has_bias)

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.cin == self.cout and self.groups > 1

    @property
    def is_pointwise(self) -> bool:
        return self.kernel == (1, 1) and self.groups == 1

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.cout, self.cin // self.groups, *self.kernel)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return _out_len(h, self.kernel[0], self.stride[0], self.padding), _out_len(
            w, self.kernel[1], self.stride[1], self.padding
        )

    def pads(self, h: int, w: int) -> tuple[tuple[int, int], tuple[int, int]]:
        """(top, bottom), (left, right) padding; extra pixel goes bottom/right."""
        return (
            _pad_amounts(h, self.kernel[0], self.stride[0], self.padding),
            _pad_amounts(w, self.kernel[1], self.stride[1], self.padding),
        )


def _out_len(n: int, k: int, s: int, padding: Padding) -> int:
    if padding is Padding.SAME:
        return -(-n // s)
    if n < k:
        raise SpecError(f"valid convolution with kernel {k} on extent {n}")
    return (n - k) // s + 1


def _pad_amounts(n: int, k: int, s: int, padding: Padding) -> tuple[int, int]:
    if padding is Padding.VALID:
        return (0, 0)
    total = max((_out_len(n, k, s, padding) - 1) * s + k - n, 0)
    return (total // 2, total - total // 2)


# ---------------------------------------------------------------------------
# array kernels


def relu6(x: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(x, DTYPE(0.0)), DTYPE(6.0))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = DTYPE(1.0) / (DTYPE(1.0) + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (DTYPE(1.0) + ex)
    return out


def activation_nhwc(x: np.ndarray, kind: ActKind) -> np.ndarray:
    kind = ActKind(kind)
    if kind is ActKind.RELU6:
        return relu6(x)
    if kind is ActKind.SIGMOID:
        return sigmoid(x)
    return np.array(x, dtype=DTYPE, copy=True)


def _check_conv_args(x: np.ndarray, w: np.ndarray, b, spec: ConvSpec):
    if x.ndim != 4 or x.shape[3] != spec.cin:
        raise SpecError(f"input {x.shape} does not have cin={spec.cin} channels")
    if tuple(w.shape) != spec.weight_shape:
        raise SpecError(f"weight shape {tuple(w.shape)} != expected {spec.weight_shape}")
    if b is not None and tuple(np.shape(b)) != (spec.cout,):
        raise SpecError(f"bias shape {np.shape(b)} != ({spec.cout},)")


def _pad_input(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    (pt, pb), (pl, pr) = spec.pads(x.shape[1], x.shape[2])
    if pt or pb or pl or pr:
        return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    return x


def conv2d_nhwc(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, spec: ConvSpec) -> np.ndarray:
    """Grouped 2-D convolution, ``w`` shaped ``[cout][cin/groups][kh][kw]``."""
    x = np.asarray(x, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    _check_conv_args(x, w, b, spec)
    if spec.is_depthwise:
        out = _depthwise(x, w, spec)
    else:
        out = _grouped(x, w, spec)
    if b is not None:
        out += np.asarray(b, dtype=DTYPE)
    return out


def _taps(xp: np.ndarray, spec: ConvSpec, oh: int, ow: int):
    (kh, kw), (sh, sw) = spec.kernel, spec.stride
    for i in range(kh):
        for j in range(kw):
            yield i, j, xp[:, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw]


def _grouped(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    n = x.shape[0]
    oh, ow = spec.output_hw(x.shape[1], x.shape[2])
    g = spec.groups
    cg, og = spec.cin // g, spec.cout // g
    xp = _pad_input(x, spec)
    wt = w.reshape(g, og, cg, *spec.kernel)
    out = np.zeros((n, oh, ow, g, og), dtype=DTYPE)
    for i, j, patch in _taps(xp, spec, oh, ow):
        patch = patch.reshape(n, oh, ow, g, cg)
        for ci in range(cg):
            out += patch[..., ci : ci + 1] * wt[:, :, ci, i, j]
    return out.reshape(n, oh, ow, spec.cout)


def _depthwise(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    # Same accumulation order as _grouped with cg == og == 1.
    n = x.shape[0]
    oh, ow = spec.output_hw(x.shape[1], x.shape[2])
    xp = _pad_input(x, spec)
    out = np.zeros((n, oh, ow, spec.cout), dtype=DTYPE)
    for i, j, patch in _taps(xp, spec, oh, ow):
        out += patch * w[:, 0, i, j]
    return out


def conv2d_grouped_nhwc(x, w, b, spec: ConvSpec) -> np.ndarray:
    """Generic grouped path, never taking the depthwise shortcut."""
    x = np.asarray(x, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    _check_conv_args(x, w, b, spec)
    out = _grouped(x, w, spec)
    if b is not None:
        out += np.asarray(b, dtype=DTYPE)
    return out


def _axis_weights(n_in: int, factor: int):
    dst = np.arange(n_in * factor, dtype=np.float64)
    src = np.clip((dst + 0.5) / factor - 0.5, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = (src - i0).astype(DTYPE)
    return i0, i1, frac


def upsample_nhwc(x: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear upsampling by an integer factor, half-pixel centres, edge clamp."""
    if int(factor) != factor or factor < 1:
        raise SpecError(f"upsample factor must be an integer >= 1, got {factor}")
    x = np.asarray(x, dtype=DTYPE)
    if factor == 1:
        return x.copy()
    y0, y1, fy = _axis_weights(x.shape[1], factor)
    fy = fy[None, :, None, None]
    rows = x[:, y0] * (DTYPE(1.0) - fy) + x[:, y1] * fy
    x0, x1, fx = _axis_weights(x.shape[2], factor)
    fx = fx[None, None, :, None]
    return rows[:, :, x0] * (DTYPE(1.0) - fx) + rows[:, :, x1] * fx


def upsample_matrix(n_in: int, factor: int) -> np.ndarray:
    """Dense ``(n_in*factor, n_in)`` interpolation matrix for one axis (float64)."""
    i0, i1, frac = _axis_weights(n_in, factor)
    m = np.zeros((n_in * factor, n_in))
    rows = np.arange(n_in * factor)
    np.add.at(m, (rows, i0), 1.0 - frac.astype(np.float64))
    np.add.at(m, (rows, i1), frac.astype(np.float64))
    return m


def global_avg_pool_nhwc(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    return x.mean(axis=(1, 2), keepdims=True, dtype=np.float64).astype(DTYPE)


def se_gate_nhwc(x: np.ndarray, w1, b1, w2, b2) -> np.ndarray:
    """Per-channel gate ``sigmoid(w2 @ relu6(w1 @ gap(x) + b1) + b2)``, shape (n,1,1,c)."""
    pooled = global_avg_pool_nhwc(x)[:, 0, 0, :]
    hidden = relu6(_dense(pooled, w1, b1))
    return sigmoid(_dense(hidden, w2, b2))[:, None, None, :]


def _dense(v: np.ndarray, w, b) -> np.ndarray:
    # v: (n, cin), w: (cout, cin). Same fixed accumulation order as conv.
    w = np.asarray(w, dtype=DTYPE)
    out = np.zeros((v.shape[0], w.shape[0]), dtype=DTYPE)
    for ci in range(w.shape[1]):
        out += v[:, ci : ci + 1] * w[:, ci]
    if b is not None:
        out += np.asarray(b, dtype=DTYPE)
    return out


def check_se_weights(c: int, w1, b1, w2, b2, reduction: int) -> int:
    if reduction < 1 or c % reduction:
        raise SpecError(f"SE reduction {reduction} must divide channel count {c}")
    cr = c // reduction
    expected = {"w1": (cr, c), "b1": (cr,), "w2": (c, cr), "b2": (c,)}
    for name, arr in zip(expected, (w1, b1, w2, b2)):
        if tuple(np.shape(arr)) != expected[name]:
            raise SpecError(f"SE {name} shape {np.shape(arr)} != {expected[name]}")
    return cr


def squeeze_excite_nhwc(x: np.ndarray, w1, b1, w2, b2, reduction: int = 4) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    check_se_weights(x.shape[3], w1, b1, w2, b2, reduction)
    return x * se_gate_nhwc(x, w1, b1, w2, b2)


def add_nhwc(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise SpecError(f"add shape mismatch {a.shape} vs {b.shape}")
    return np.add(a, b, dtype=DTYPE)


# ---------------------------------------------------------------------------
# LogicalTensor wrappers


def _wrap(values: np.ndarray, like: LogicalTensor, layout: Layout | None) -> LogicalTensor:
    return from_numpy(values, like.layout if layout is None else layout)


def conv2d(x: LogicalTensor, w, b, spec: ConvSpec, layout: Layout | None = None) -> LogicalTensor:
    if x.shape.c != spec.cin:
        raise SpecError(f"input has {x.shape.c} channels, spec expects {spec.cin}")
    return _wrap(conv2d_nhwc(x.numpy(), w, b, spec), x, layout)


def bilinear_upsample(x: LogicalTensor, factor: int, layout: Layout | None = None) -> LogicalTensor:
    return _wrap(upsample_nhwc(x.numpy(), factor), x, layout)


def global_avg_pool(x: LogicalTensor, layout: Layout | None = None) -> LogicalTensor:
    return _wrap(global_avg_pool_nhwc(x.numpy()), x, layout)


def squeeze_excite(x: LogicalTensor, w1, b1, w2, b2, reduction: int = 4,
                   layout: Layout | None = None) -> LogicalTensor:
    return _wrap(squeeze_excite_nhwc(x.numpy(), w1, b1, w2, b2, reduction), x, layout)


def add(a: LogicalTensor, b: LogicalTensor, layout: Layout | None = None) -> LogicalTensor:
    if a.shape != b.shape:
        raise SpecError(f"add shape mismatch {a.shape} vs {b.shape}")
    return _wrap(add_nhwc(a.numpy(), b.numpy()), a, layout)


def activation(x: LogicalTensor, kind: ActKind, layout: Layout | None = None) -> LogicalTensor:
    return _wrap(activation_nhwc(x.numpy(), kind), x, layout)
