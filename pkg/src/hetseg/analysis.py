"""Static cost analysis: parameters, multiply-accumulates and serialized size.

Conventions for non-convolution nodes (MAC-equivalents per element):

* bilinear upsample -- 4 per output element
* add, activation -- 1 per element
* global average pool -- 1 per input element
* squeeze-and-excitation -- both projections, plus the pooling (1 per input
  element) and the gating multiply (1 per element)

``ops = 2 * macs`` and ``size_bytes = 4 * params`` (float32).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .exceptions import AnalysisError
from .graph import Graph, OpNode, topo_schedule

FOOTER = (
    "# MAC conventions: conv = out_h*out_w*kh*kw*(cin/groups)*cout; upsample = 4/output element; "
    "add, activation = 1/element; gap = 1/input element; SE = 2 projections + gap + gating.\n"
    "# ops = 2*macs; size_mb = 4*params/1e6.\n"
)


@dataclass
class NodeCost:
    params: int
    macs: int
    node_id: int = -1
    name: str = ""
    kind: str = ""


@dataclass
class CostReport:
    nodes: list[NodeCost] = field(default_factory=list)
    weight_names: set[str] = field(default_factory=set)

    @property
    def params(self) -> int:
        return sum(n.params for n in self.nodes)

    @property
    def macs(self) -> int:
        return sum(n.macs for n in self.nodes)

    @property
    def ops(self) -> int:
        return 2 * self.macs

    @property
    def size_bytes(self) -> int:
        return 4 * self.params

    @property
    def size_mb(self) -> float:
        return self.size_bytes / 1e6

    @property
    def ops_e9(self) -> float:
        return self.ops / 1e9

    def to_csv(self, graph: Graph | None = None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "name", "kind", "params", "macs"])
        for n in self.nodes:
            writer.writerow([n.node_id, n.name, n.kind, n.params, n.macs])
        writer.writerow(["total", "", "", self.params, self.macs])
        return buf.getvalue()


def _shape(g: Graph, tensor: str):
    try:
        return g.tensors[tensor]
    except KeyError:
        raise AnalysisError(f"tensor {tensor!r} has no resolved shape") from None


def _conv_cost(spec, out) -> tuple[int, int]:
    kh, kw = spec.kernel
    per_out = kh * kw * (spec.cin // spec.groups) * spec.cout
    params = per_out + (spec.cout if spec.has_bias else 0)
    return params, out.n * out.h * out.w * per_out


def count_node(node: OpNode, g: Graph) -> NodeCost:
    ins = [_shape(g, t) for t in node.inputs]
    outs = [_shape(g, t) for t in node.outputs]
    kind = node.kind
    if kind == "conv":
        params, macs = _conv_cost(node.attrs["spec"], outs[0])
    elif kind == "conv_multi":
        costs = [_conv_cost(s, o) for s, o in zip(node.attrs["specs"], outs)]
        params, macs = sum(c[0] for c in costs), sum(c[1] for c in costs)
    elif kind == "upsample":
        params, macs = 0, 4 * outs[0].size
    elif kind in ("add", "activation"):
        params, macs = 0, outs[0].size
    elif kind == "gap":
        params, macs = 0, ins[0].size
    elif kind == "squeeze_excite":
        x = ins[0]
        cr = x.c // node.attrs["reduction"]
        params = 2 * x.c * cr + cr + x.c
        macs = x.n * 2 * x.c * cr + 2 * x.size
    else:
        raise AnalysisError(f"no cost model for op kind {kind!r}")
    return NodeCost(params, macs, node.id, node.name, kind)


def analyze(g: Graph, resolution: int | None = None) -> CostReport:
    """Per-node and total cost of ``g`` in schedule order."""
    if resolution is not None:
        shape = _shape(g, g.inputs[0])
        if (shape.h, shape.w) != (resolution, resolution):
            raise AnalysisError(f"graph was built for {shape.h}x{shape.w}, not {resolution}")
    report = CostReport()
    for node in topo_schedule(g):
        report.nodes.append(count_node(node, g))
        report.weight_names.update(node.weights)
    return report


def _row(label, report: CostReport) -> list:
    return [label, report.params, f"{report.size_mb:.3f}", f"{report.ops_e9:.3f}"]


def ablation_rows(configs: Iterable) -> list[list]:
    from .zoo import ModelConfig, build_model

    rows = []
    for item in configs:
        label, cfg = item if isinstance(item, tuple) else (None, item)
        if not isinstance(cfg, ModelConfig):
            cfg = ModelConfig.from_dict(cfg)
        report = analyze(build_model(cfg, with_weights=False), cfg.resolution)
        rows.append(_row(label or cfg.label, report))
    return rows


def ablation_report(configs: Sequence, fmt: str = "csv") -> str:
    """One row per config: ``config,params,size_mb,ops_e9``.

    ``configs`` holds ModelConfigs, JSON-style dicts, or ``(label, config)`` pairs.
    """
    rows = ablation_rows(configs)
    header = ["config", "params", "size_mb", "ops_e9"]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    table = [header] + [[str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = [
        "  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths)))
        for r in table
    ]
    return "\n".join(lines) + "\n" + FOOTER


def load_suite(data) -> list[tuple[str, object]]:
    """``(label, ModelConfig)`` pairs from an ablation suite document.

    Accepts ``{"configs": [...]}`` or a bare list; each entry is either a
    plain model config or ``{"label": ..., "config": {...}}``.
    """
    from .exceptions import ConfigError
    from .zoo import ModelConfig

    entries = data.get("configs") if isinstance(data, dict) else data
    if not isinstance(entries, list) or not entries:
        raise ConfigError("ablation suite must hold a non-empty list of configs")
    out = []
    for entry in entries:
        if isinstance(entry, dict) and "config" in entry:
            cfg = ModelConfig.from_dict(entry["config"])
            out.append((str(entry.get("label", cfg.label)), cfg))
        else:
            cfg = ModelConfig.from_dict(entry)
            out.append((cfg.label, cfg))
    return out
