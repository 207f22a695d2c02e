"""Dense 4-D tensors whose logical shape is decoupled from physical storage.

A :class:`LogicalTensor` is a view (shape, layout, offset) onto a
:class:`PhysicalBuffer`. Several logical tensors may alias one buffer, and
the same logical values can live in any of the three layouts:

* ``INTERLEAVED`` -- channel-last, ``[n][h][w][c]``
* ``PLANAR`` -- channel-first, ``[n][c][h][w]``
* ``PACKED4`` -- ``[n][ceil(c/4)][h][w][4]``, channel lanes zero-padded to 4
"""
from __future__ import annotations

import enum
import itertools
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .exceptions import AllocationError, BoundsError, SpecError

DTYPE = np.float32
PACK = 4
MAX_ELEMENTS = 2**31 - 1

RAW_MAGIC = b"HSEG"
RAW_VERSION = 1
RAW_HEADER = struct.Struct("<4s5I")


@dataclass(frozen=True)
class Shape:
    n: int
    h: int
    w: int
    c: int

    def __post_init__(self):
        for name in ("n", "h", "w", "c"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise SpecError(f"shape dimension {name}={v!r} must be an integer >= 1")
            object.__setattr__(self, name, int(v))

    @classmethod
    def of(cls, dims) -> "Shape":
        if isinstance(dims, Shape):
            return dims
        return cls(*dims)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.n, self.h, self.w, self.c)

    @property
    def size(self) -> int:
        return self.n * self.h * self.w * self.c

    def __iter__(self):
        return iter(self.as_tuple())

    def __str__(self):
        return "x".join(str(d) for d in self.as_tuple())


class Layout(enum.Enum):
    INTERLEAVED = "interleaved"
    PLANAR = "planar"
    PACKED4 = "packed4"

    def extent(self, shape: Shape) -> int:
        """Number of storage elements needed for ``shape`` in this layout."""
        if self is Layout.PACKED4:
            return shape.n * slices(shape.c) * shape.h * shape.w * PACK
        return shape.size

    def index(self, shape: Shape, n: int, h: int, w: int, c: int) -> int:
        if self is Layout.INTERLEAVED:
            return ((n * shape.h + h) * shape.w + w) * shape.c + c
        if self is Layout.PLANAR:
            return ((n * shape.c + c) * shape.h + h) * shape.w + w
        s, lane = divmod(c, PACK)
        return (((n * slices(shape.c) + s) * shape.h + h) * shape.w + w) * PACK + lane


def slices(c: int) -> int:
    return -(-c // PACK)


_buffer_ids = itertools.count(1)


class PhysicalBuffer:
    """Flat float32 storage with a process-unique id."""

    def __init__(self, capacity: int):
        if capacity > MAX_ELEMENTS:
            raise AllocationError(f"buffer of {capacity} elements exceeds index range")
        self.storage = np.zeros(capacity, dtype=DTYPE)
        self.id = next(_buffer_ids)

    @property
    def capacity(self) -> int:
        return self.storage.size

    @property
    def byte_len(self) -> int:
        return self.storage.nbytes

    def __repr__(self):
        return f"PhysicalBuffer(id={self.id}, byte_len={self.byte_len})"


class LogicalTensor:
    """Logical NHWC view over a region of a physical buffer."""

    def __init__(self, shape: Shape, layout: Layout, buffer: PhysicalBuffer, offset: int = 0):
        shape = Shape.of(shape)
        if offset < 0 or offset + layout.extent(shape) > buffer.capacity:
            raise AllocationError(
                f"{layout.value} tensor {shape} at offset {offset} overruns "
                f"buffer of {buffer.capacity} elements"
            )
        self.shape = shape
        self.layout = layout
        self.buffer = buffer
        self.offset = int(offset)

    def __repr__(self):
        return (
            f"LogicalTensor(shape={self.shape}, layout={self.layout.value}, "
            f"buffer={self.buffer.id}, offset={self.offset})"
        )

    @property
    def raw(self) -> np.ndarray:
        """The storage region covered by this tensor (a view, padding included)."""
        return self.buffer.storage[self.offset : self.offset + self.layout.extent(self.shape)]

    def _storage_view(self) -> np.ndarray:
        n, h, w, c = self.shape
        raw = self.raw
        if self.layout is Layout.INTERLEAVED:
            return raw.reshape(n, h, w, c)
        if self.layout is Layout.PLANAR:
            return raw.reshape(n, c, h, w)
        return raw.reshape(n, slices(c), h, w, PACK)

    def numpy(self) -> np.ndarray:
        """Copy of the logical values as an ``(n, h, w, c)`` float32 array."""
        v = self._storage_view()
        if self.layout is Layout.INTERLEAVED:
            return v.copy()
        if self.layout is Layout.PLANAR:
            return np.ascontiguousarray(v.transpose(0, 2, 3, 1))
        n, s, h, w, _ = v.shape
        full = v.transpose(0, 2, 3, 1, 4).reshape(n, h, w, s * PACK)
        return np.ascontiguousarray(full[..., : self.shape.c])

    def assign(self, values) -> "LogicalTensor":
        """Overwrite every logical element from an ``(n, h, w, c)`` array."""
        values = np.asarray(values, dtype=DTYPE)
        if values.shape != self.shape.as_tuple():
            raise SpecError(f"cannot assign {values.shape} into tensor of shape {self.shape}")
        v = self._storage_view()
        if self.layout is Layout.INTERLEAVED:
            v[...] = values
        elif self.layout is Layout.PLANAR:
            v[...] = values.transpose(0, 3, 1, 2)
        else:
            n, h, w, c = self.shape
            s = slices(c)
            padded = np.zeros((n, h, w, s * PACK), dtype=DTYPE)
            padded[..., :c] = values
            v[...] = padded.reshape(n, h, w, s, PACK).transpose(0, 3, 1, 2, 4)
        return self

    def _flat_index(self, n, h, w, c) -> int:
        for name, i, dim in zip("nhwc", (n, h, w, c), self.shape.as_tuple()):
            if not 0 <= i < dim:
                raise BoundsError(f"index {name}={i} out of range [0, {dim})")
        return self.offset + self.layout.index(self.shape, n, h, w, c)

    def read(self, n: int, h: int, w: int, c: int) -> float:
        return float(self.buffer.storage[self._flat_index(n, h, w, c)])

    def write(self, n: int, h: int, w: int, c: int, value: float) -> None:
        self.buffer.storage[self._flat_index(n, h, w, c)] = value


def make_tensor(shape, layout: Layout = Layout.INTERLEAVED, fill=0.0, seed=None) -> LogicalTensor:
    """Allocate a tensor on a fresh buffer.

    ``fill`` is a scalar, an array-like in logical ``(n, h, w, c)`` order, or
    ``"random"``; random fills are uniform in ``[-1, 1)`` from ``seed``.
    """
    shape = Shape.of(shape)
    if shape.size > MAX_ELEMENTS:
        raise AllocationError(f"tensor {shape} has more than {MAX_ELEMENTS} elements")
    t = LogicalTensor(shape, layout, PhysicalBuffer(layout.extent(shape)))
    if isinstance(fill, str):
        if fill != "random":
            raise SpecError(f"unknown fill {fill!r}")
        rng = np.random.default_rng(seed)
        t.assign(rng.uniform(-1.0, 1.0, size=shape.as_tuple()).astype(DTYPE))
    elif np.ndim(fill) == 0:
        if float(fill) != 0.0:
            t.assign(np.full(shape.as_tuple(), fill, dtype=DTYPE))
    else:
        t.assign(np.asarray(fill, dtype=DTYPE).reshape(shape.as_tuple()))
    return t


def from_numpy(values, layout: Layout = Layout.INTERLEAVED) -> LogicalTensor:
    values = np.asarray(values, dtype=DTYPE)
    if values.ndim != 4:
        raise SpecError(f"expected a 4-D (n, h, w, c) array, got shape {values.shape}")
    return make_tensor(values.shape, layout, fill=values)


def repack(t: LogicalTensor, target: Layout) -> LogicalTensor:
    """Copy ``t`` into a new buffer with layout ``target``; values are bit-equal."""
    out = LogicalTensor(t.shape, target, PhysicalBuffer(target.extent(t.shape)))
    return out.assign(t.numpy())


def alias(t: LogicalTensor, shape=None, layout: Layout | None = None, offset: int | None = None) -> LogicalTensor:
    """Another logical view over the same buffer as ``t``."""
    return LogicalTensor(
        t.shape if shape is None else Shape.of(shape),
        t.layout if layout is None else layout,
        t.buffer,
        t.offset if offset is None else offset,
    )


def dump_raw(t: LogicalTensor, fh: BinaryIO) -> None:
    """Write the 24-byte header then little-endian float32 values in interleaved order."""
    n, h, w, c = t.shape
    fh.write(RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, n, h, w, c))
    fh.write(t.numpy().astype("<f4").tobytes())


def load_raw(fh: BinaryIO, layout: Layout = Layout.INTERLEAVED) -> LogicalTensor:
    header = fh.read(RAW_HEADER.size)
    if len(header) != RAW_HEADER.size:
        raise SpecError("truncated tensor header")
    magic, version, n, h, w, c = RAW_HEADER.unpack(header)
    if magic != RAW_MAGIC:
        raise SpecError(f"bad tensor magic {magic!r}")
    if version != RAW_VERSION:
        raise SpecError(f"unsupported tensor dump version {version}")
    shape = Shape(n, h, w, c)
    payload = fh.read(4 * shape.size)
    if len(payload) != 4 * shape.size:
        raise SpecError("truncated tensor payload")
    values = np.frombuffer(payload, dtype="<f4").reshape(shape.as_tuple())
    return from_numpy(values, layout)
