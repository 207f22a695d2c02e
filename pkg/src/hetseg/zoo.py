"""Segmentation model builders.

The encoder is an EfficientNet-Lite0 style stack of inverted residual
blocks reaching 1/32 of the input resolution. The decoder starts with a
bottleneck block carrying squeeze-and-excitation at the coarsest scale, then
refines at 1/16, 1/8 and 1/4 with one of three variants before a final x4
bilinear upsample and sigmoid.

Node tags describe where a node sits: ``part`` (``encoder``/``decoder``),
``scale`` (denominator of the feature resolution) and, in the decoder,
``role`` (``head``, ``adapter``, ``refine``, ``output``).
"""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import asdict, dataclass
from typing import BinaryIO, ClassVar

import numpy as np

from .exceptions import ConfigError, SpecError
from .graph import Graph
from .ops import ActKind, ConvSpec
from .tensor import DTYPE

TAP_SCALES = (2, 4, 8, 16, 32)
REFINE_SCALES = (16, 8, 4)

WEIGHT_MAGIC = b"HSWT"
WEIGHT_VERSION = 1


class Decoder(enum.Enum):
    BILINEAR = "bilinear_upsampling"
    CHANNEL_ATTENTION = "channel_attention"
    MLP = "mlp"


class ConvType(enum.Enum):
    DEPTHWISE = "depthwise"
    GROUP = "group"


def _parse_enum(enum_cls, value):
    if isinstance(value, enum_cls):
        return value
    key = str(value).strip().lower().replace("-", "_")
    for member in enum_cls:
        if key in (member.value, member.name.lower(), member.value.replace("_", "")):
            return member
    raise ConfigError(f"unknown {enum_cls.__name__} {value!r}")


@dataclass(frozen=True)
class StageSpec:
    repeats: int
    channels: int
    stride: int
    expansion: int
    kernel: int


STEM_CHANNELS = 32
STEM_STRIDE = 2
LITE0_STAGES = (
    StageSpec(1, 16, 1, 1, 3),
    StageSpec(2, 24, 2, 6, 3),
    StageSpec(2, 40, 2, 6, 5),
    StageSpec(3, 80, 2, 6, 3),
    StageSpec(3, 112, 1, 6, 5),
    StageSpec(4, 192, 2, 6, 5),
    StageSpec(1, 320, 1, 6, 3),
)
# stage index whose output is the skip tap at each scale
TAP_STAGES = {2: 0, 4: 1, 8: 2, 16: 4, 32: 6}


def total_stride(stages=LITE0_STAGES, stem_stride: int = STEM_STRIDE) -> int:
    return stem_stride * int(np.prod([s.stride for s in stages]))


assert total_stride() == 32


def round_channels(c: float, divisor: int = 8) -> int:
    """Round to the nearest multiple of ``divisor`` without dropping below 90%."""
    new = max(divisor, int(c + divisor / 2) // divisor * divisor)
    if new < 0.9 * c:
        new += divisor
    return new


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 512
    width_multiplier: float = 1.0
    decoder: Decoder = Decoder.MLP
    conv_type: ConvType = ConvType.GROUP
    group_size: int = 16
    se_reduction: int = 4
    seed: int = 0
    mlp_depth: int = 2

    JSON_KEYS: ClassVar[tuple[str, ...]] = (
        "resolution", "width_multiplier", "decoder", "conv_type", "group_size", "se_reduction", "seed",
    )
    # per-channel RGB normalisation applied to 8-bit images before inference
    NORM_MEAN: ClassVar[float] = 127.5
    NORM_STD: ClassVar[float] = 127.5

    def __post_init__(self):
        object.__setattr__(self, "decoder", _parse_enum(Decoder, self.decoder))
        object.__setattr__(self, "conv_type", _parse_enum(ConvType, self.conv_type))
        for name in ("resolution", "group_size", "se_reduction", "seed", "mlp_depth"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v:
                raise ConfigError(f"{name} must be an integer, got {v!r}")
            object.__setattr__(self, name, int(v))
        object.__setattr__(self, "width_multiplier", float(self.width_multiplier))
        if self.resolution <= 0 or self.resolution % 32:
            raise ConfigError(f"resolution {self.resolution} is not a positive multiple of 32")
        if not self.width_multiplier > 0:
            raise ConfigError(f"width_multiplier must be > 0, got {self.width_multiplier}")
        if self.group_size < 1 or self.se_reduction < 1 or self.mlp_depth < 1:
            raise ConfigError("group_size, se_reduction and mlp_depth must be >= 1")
        if self.conv_type is ConvType.GROUP:
            for c in spatial_channels(self):
                if c % self.group_size:
                    raise ConfigError(f"{self.group_size} groups do not divide {c} channels")
        for c in se_channels(self):
            if c % self.se_reduction:
                raise ConfigError(f"se_reduction {self.se_reduction} does not divide {c} channels")

    def width(self, c: int) -> int:
        return round_channels(c * self.width_multiplier)

    @property
    def label(self) -> str:
        conv = "dw" if self.conv_type is ConvType.DEPTHWISE else f"g{self.group_size}"
        return f"{self.decoder.value}/{conv}/w{self.width_multiplier:g}/r{self.resolution}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder"] = self.decoder.value
        d["conv_type"] = self.conv_type.value
        return {k: d[k] for k in self.JSON_KEYS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        if not isinstance(d, dict):
            raise ConfigError("model config must be a JSON object")
        unknown = set(d) - set(cls.JSON_KEYS)
        missing = set(cls.JSON_KEYS) - set(d)
        if unknown or missing:
            raise ConfigError(f"model config keys: unknown {sorted(unknown)}, missing {sorted(missing)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"model config is not valid JSON: {exc}") from exc


def encoder_widths(cfg: ModelConfig) -> dict[int, int]:
    """Output channels of each skip tap, keyed by scale."""
    return {s: cfg.width(LITE0_STAGES[i].channels) for s, i in TAP_STAGES.items()}


def decoder_widths(cfg: ModelConfig) -> dict[int, int]:
    return {s: max(8, c // 2) for s, c in encoder_widths(cfg).items()}


def spatial_channels(cfg: ModelConfig) -> list[int]:
    chans = []
    cin = cfg.width(STEM_CHANNELS)
    for stage in LITE0_STAGES:
        cout = cfg.width(stage.channels)
        for _ in range(stage.repeats):
            chans.append(cin * stage.expansion)
            cin = cout
    return chans


def se_channels(cfg: ModelConfig) -> list[int]:
    d = decoder_widths(cfg)
    out = [d[32]]
    if cfg.decoder is Decoder.CHANNEL_ATTENTION:
        out += [d[s] for s in REFINE_SCALES]
    return out


# ---------------------------------------------------------------------------
# weight initialisation


class _Init:
    """Deterministic He-style initialiser with batch-norm folding."""

    def __init__(self, seed: int, enabled: bool = True):
        self.rng = np.random.default_rng(seed)
        self.enabled = enabled

    def conv(self, spec: ConvSpec, bn: bool = True):
        if not self.enabled:
            return None, None
        cout, cg, kh, kw = spec.weight_shape
        fan_in = cg * kh * kw
        w = self.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=spec.weight_shape)
        b = np.zeros(cout)
        if bn:
            gamma = self.rng.uniform(0.8, 1.2, cout)
            beta = self.rng.normal(0.0, 0.05, cout)
            mean = self.rng.normal(0.0, 0.05, cout)
            var = self.rng.uniform(0.8, 1.2, cout)
            w, b = fold_batch_norm(w, b, gamma, beta, mean, var)
        return w.astype(DTYPE), b.astype(DTYPE)

    def se(self, c: int, reduction: int):
        if not self.enabled:
            return None
        cr = c // reduction
        w1 = self.rng.normal(0.0, np.sqrt(2.0 / c), size=(cr, c))
        w2 = self.rng.normal(0.0, np.sqrt(1.0 / cr), size=(c, cr))
        return [a.astype(DTYPE) for a in (w1, np.zeros(cr), w2, np.zeros(c))]


def fold_batch_norm(w, b, gamma, beta, mean, var, eps: float = 1e-3):
    """Fold inference-mode batch norm into the preceding conv's weight and bias."""
    scale = np.asarray(gamma) / np.sqrt(np.asarray(var) + eps)
    w = np.asarray(w) * scale.reshape(-1, *([1] * (np.ndim(w) - 1)))
    b = (np.asarray(b) - mean) * scale + beta
    return w, b


# ---------------------------------------------------------------------------
# builders


def _check_hw(input_hw):
    h, w = input_hw
    if h <= 0 or w <= 0 or h % 32 or w % 32:
        raise ConfigError(f"input size {h}x{w} is not a positive multiple of 32")
    return int(h), int(w)


def _spatial_groups(cfg: ModelConfig, c: int) -> int:
    return c if cfg.conv_type is ConvType.DEPTHWISE else cfg.group_size


def build_encoder(cfg: ModelConfig, graph: Graph | None = None, input_hw=None,
                  init: _Init | None = None) -> tuple[Graph, dict[int, str]]:
    """Add the encoder to ``graph``; returns the graph and skip taps keyed by scale."""
    h, w = _check_hw(input_hw or (cfg.resolution, cfg.resolution))
    g = graph if graph is not None else Graph()
    init = init or _Init(cfg.seed)
    x = g.add_input("image", (1, h, w, 3))

    def conv(x, spec, name, act, scale, **tags):
        wt, b = init.conv(spec)
        return g.conv(x, spec, name, act, wt, b, tags={"part": "encoder", "scale": scale, **tags})

    cin = cfg.width(STEM_CHANNELS)
    x = conv(x, ConvSpec.square(3, 3, cin, stride=STEM_STRIDE), "enc.stem", ActKind.RELU6, 2)
    scale = STEM_STRIDE
    taps = {}
    for si, stage in enumerate(LITE0_STAGES):
        cout = cfg.width(stage.channels)
        for rep in range(stage.repeats):
            stride = stage.stride if rep == 0 else 1
            scale *= stride
            name = f"enc.s{si}.b{rep}"
            tags = {"stage": si, "block": name}
            mid = cin * stage.expansion
            y = x
            if stage.expansion != 1:
                y = conv(y, ConvSpec.square(1, cin, mid), f"{name}.expand", ActKind.RELU6, scale // stride, **tags)
            spatial = ConvSpec.square(stage.kernel, mid, mid, stride=stride, groups=_spatial_groups(cfg, mid))
            y = conv(y, spatial, f"{name}.spatial", ActKind.RELU6, scale, **tags)
            y = conv(y, ConvSpec.square(1, mid, cout), f"{name}.project", ActKind.IDENTITY, scale, **tags)
            if stride == 1 and cin == cout:
                y = g.add(x, y, f"{name}.residual", tags={"part": "encoder", "scale": scale, **tags})
            x, cin = y, cout
        for s, idx in TAP_STAGES.items():
            if idx == si:
                taps[s] = x
    assert scale == 32
    return g, taps


def build_decoder(cfg: ModelConfig, graph: Graph, taps: dict[int, str],
                  init: _Init | None = None) -> Graph:
    """Add the decoder; the graph gains outputs ``mask`` and ``coarse_mask``."""
    missing = [s for s in TAP_SCALES if s not in taps]
    if missing:
        raise ConfigError(f"decoder needs skip taps at scales {missing}")
    g = graph
    init = init or _Init(cfg.seed + 1)
    d = decoder_widths(cfg)

    def tags(scale, role):
        return {"part": "decoder", "scale": scale, "role": role}

    def conv(x, spec, name, act, scale, role, bn=True):
        wt, b = init.conv(spec, bn=bn)
        return g.conv(x, spec, name, act, wt, b, tags=tags(scale, role))

    def se(x, c, name, scale, role):
        return g.squeeze_excite(x, cfg.se_reduction, name, init.se(c, cfg.se_reduction), tags(scale, role))

    # bottleneck head with channel attention at 1/32
    c32 = g.tensors[taps[32]].c
    h = conv(taps[32], ConvSpec.square(1, c32, d[32]), "dec.head.reduce", ActKind.RELU6, 32, "head")
    y = conv(h, ConvSpec.square(3, d[32], d[32], groups=d[32]), "dec.head.dw", ActKind.RELU6, 32, "head")
    y = se(y, d[32], "dec.head.se", 32, "head")
    y = conv(y, ConvSpec.square(1, d[32], d[32]), "dec.head.project", ActKind.IDENTITY, 32, "head")
    feat = g.add(h, y, "dec.head.residual", tags=tags(32, "head"))
    coarse = conv(feat, ConvSpec.square(1, d[32], 1), "dec.head.coarse", ActKind.IDENTITY, 32, "head", bn=False)
    coarse = g.activation(coarse, ActKind.SIGMOID, "coarse_mask", tags=tags(32, "head"))

    prev = 32
    for s in REFINE_SCALES:
        c = d[s]
        name = f"dec.s{s}"
        low = conv(feat, ConvSpec.square(1, d[prev], c), f"{name}.reduce", ActKind.IDENTITY, prev, "adapter")
        cs = g.tensors[taps[s]].c
        skip = conv(taps[s], ConvSpec.square(1, cs, c), f"{name}.skip", ActKind.IDENTITY, s, "adapter")
        up = g.upsample(low, prev // s, f"{name}.upsample", tags=tags(s, "refine"))
        if cfg.decoder is Decoder.BILINEAR:
            act = g.activation(up, ActKind.RELU6, f"{name}.act", tags=tags(s, "refine"))
            feat = g.add(act, skip, f"{name}.sum", tags=tags(s, "refine"))
        elif cfg.decoder is Decoder.CHANNEL_ATTENTION:
            y = se(up, c, f"{name}.se", s, "refine")
            y = g.add(y, skip, f"{name}.sum", tags=tags(s, "refine"))
            y = conv(y, ConvSpec.square(1, c, c), f"{name}.pw1", ActKind.RELU6, s, "refine")
            y = conv(y, ConvSpec.square(3, c, c, groups=c), f"{name}.dw", ActKind.RELU6, s, "refine")
            feat = conv(y, ConvSpec.square(1, c, c), f"{name}.pw2", ActKind.IDENTITY, s, "refine")
        else:
            y = g.add(up, skip, f"{name}.sum", tags=tags(s, "refine"))
            for k in range(cfg.mlp_depth):
                y = conv(y, ConvSpec.square(1, c, c), f"{name}.mlp{k}", ActKind.RELU6, s, "refine")
            feat = y
        prev = s

    logits = conv(feat, ConvSpec.square(1, d[4], 1), "dec.logits", ActKind.IDENTITY, 4, "output", bn=False)
    up = g.upsample(logits, 4, "dec.upsample", tags=tags(1, "output"))
    mask = g.activation(up, ActKind.SIGMOID, "mask", tags=tags(1, "output"))
    g.mark_output(mask, coarse)
    return g


def build_model(cfg: ModelConfig, input_hw=None, with_weights: bool = True) -> Graph:
    """Encoder + decoder for ``cfg``; weights depend only on ``cfg``, not on ``input_hw``."""
    g, taps = build_encoder(cfg, input_hw=input_hw, init=_Init(cfg.seed, with_weights))
    build_decoder(cfg, g, taps, init=_Init(cfg.seed + 1, with_weights))
    return g


# ---------------------------------------------------------------------------
# weight files

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


def save_weights(weights: dict[str, np.ndarray], fh: BinaryIO) -> None:
    """Write weights in sorted-name order (byte-identical for equal inputs)."""
    fh.write(WEIGHT_MAGIC + _U32.pack(WEIGHT_VERSION) + _U32.pack(len(weights)))
    for name in sorted(weights):
        arr = np.asarray(weights[name], dtype="<f4")
        raw = name.encode("utf-8")
        fh.write(_U16.pack(len(raw)) + raw + _U32.pack(arr.ndim))
        fh.write(b"".join(_U32.pack(d) for d in arr.shape))
        fh.write(arr.tobytes())


def _read(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise SpecError("truncated weight file")
    return data


def load_weights(fh: BinaryIO) -> dict[str, np.ndarray]:
    if _read(fh, 4) != WEIGHT_MAGIC:
        raise SpecError("not a weight file (bad magic)")
    (version,) = _U32.unpack(_read(fh, 4))
    if version != WEIGHT_VERSION:
        raise SpecError(f"unsupported weight file version {version}")
    (count,) = _U32.unpack(_read(fh, 4))
    out = {}
    for _ in range(count):
        (nlen,) = _U16.unpack(_read(fh, 2))
        name = _read(fh, nlen).decode("utf-8")
        (rank,) = _U32.unpack(_read(fh, 4))
        dims = [_U32.unpack(_read(fh, 4))[0] for _ in range(rank)]
        size = int(np.prod(dims)) if dims else 1
        out[name] = np.frombuffer(_read(fh, 4 * size), dtype="<f4").reshape(dims).astype(DTYPE)
    return out
