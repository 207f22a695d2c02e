"""Operator DAG, layout planner, multi-output fusion and the reference executor."""
from __future__ import annotations

import copy
import enum
import heapq
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import ops
from .exceptions import ExecutionError, GraphError, SpecError
from .ops import ActKind, ConvSpec
from .tensor import DTYPE, Layout, LogicalTensor, PhysicalBuffer, Shape

KINDS = ("conv", "conv_multi", "upsample", "gap", "squeeze_excite", "add", "activation")


@dataclass
class OpNode:
    id: int
    name: str
    kind: str
    inputs: list[str]
    outputs: list[str]
    weights: list[str] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    tags: dict = field(default_factory=dict)

    @property
    def output(self) -> str:
        return self.outputs[0]


@dataclass
class FusionGroup:
    members: list[int]
    fused_id: int
    input: str


def infer_shapes(kind: str, attrs: dict, in_shapes: Sequence[Shape]) -> list[Shape]:
    if kind not in KINDS:
        raise GraphError(f"unknown op kind {kind!r}")
    x = in_shapes[0]
    if kind in ("conv", "conv_multi"):
        specs = [attrs["spec"]] if kind == "conv" else attrs["specs"]
        out = []
        for spec in specs:
            if x.c != spec.cin:
                raise SpecError(f"conv expects {spec.cin} input channels, got {x.c}")
            oh, ow = spec.output_hw(x.h, x.w)
            out.append(Shape(x.n, oh, ow, spec.cout))
        return out
    if kind == "upsample":
        f = attrs["factor"]
        return [Shape(x.n, x.h * f, x.w * f, x.c)]
    if kind == "gap":
        return [Shape(x.n, 1, 1, x.c)]
    if kind == "add":
        if len(in_shapes) != 2 or in_shapes[0] != in_shapes[1]:
            raise SpecError(f"add needs two equal shapes, got {[str(s) for s in in_shapes]}")
    if kind == "squeeze_excite" and x.c % attrs["reduction"]:
        raise SpecError(f"SE reduction {attrs['reduction']} must divide {x.c}")
    return [x]


class Graph:
    """A DAG of operators over named tensors, with a name-keyed weight store."""

    def __init__(self):
        self.nodes: dict[int, OpNode] = {}
        self.tensors: dict[str, Shape] = {}
        self.weights: dict[str, np.ndarray] = {}
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self._next_id = 0
        self._producer: dict[str, int] = {}

    # -- construction -----------------------------------------------------

    def add_input(self, name: str, shape) -> str:
        self._claim(name, Shape.of(shape))
        self.inputs.append(name)
        return name

    def mark_output(self, *names: str) -> None:
        for name in names:
            if name not in self.tensors:
                raise GraphError(f"unknown tensor {name!r}")
            if name not in self.outputs:
                self.outputs.append(name)

    def set_weight(self, name: str, value) -> str:
        self.weights[name] = np.asarray(value, dtype=DTYPE)
        return name

    def _claim(self, name: str, shape: Shape) -> None:
        if name in self.tensors:
            raise GraphError(f"tensor {name!r} already has a producer")
        self.tensors[name] = shape

    def add_node(self, kind: str, inputs: Sequence[str], attrs: dict | None = None,
                 weights: Sequence[str] = (), name: str | None = None,
                 outputs: Sequence[str] | None = None, out_shapes: Sequence | None = None,
                 tags: dict | None = None, node_id: int | None = None) -> OpNode:
        attrs = dict(attrs or {})
        node_id = self._next_id if node_id is None else node_id
        if node_id in self.nodes:
            raise GraphError(f"duplicate node id {node_id}")
        self._next_id = max(self._next_id, node_id + 1)
        name = name or f"{kind}_{node_id}"
        if out_shapes is None:
            missing = [t for t in inputs if t not in self.tensors]
            if missing:
                raise GraphError(f"node {name!r} reads unknown tensors {missing}")
            out_shapes = infer_shapes(kind, attrs, [self.tensors[t] for t in inputs])
        out_shapes = [Shape.of(s) for s in out_shapes]
        outputs = list(outputs) if outputs is not None else (
            [name] if len(out_shapes) == 1 else [f"{name}:{i}" for i in range(len(out_shapes))]
        )
        if len(outputs) != len(out_shapes):
            raise GraphError(f"node {name!r}: {len(outputs)} outputs but {len(out_shapes)} shapes")
        for t, s in zip(outputs, out_shapes):
            self._claim(t, s)
            self._producer[t] = node_id
        node = OpNode(node_id, name, kind, list(inputs), outputs, list(weights), attrs, dict(tags or {}))
        self.nodes[node_id] = node
        return node

    def conv(self, x: str, spec: ConvSpec, name: str, act: ActKind = ActKind.IDENTITY,
             w=None, b=None, tags: dict | None = None) -> str:
        wnames = [f"{name}.w"] + ([f"{name}.b"] if spec.has_bias else [])
        if w is not None:
            self.set_weight(wnames[0], w)
        if b is not None and spec.has_bias:
            self.set_weight(wnames[1], b)
        node = self.add_node("conv", [x], {"spec": spec, "act": ActKind(act)}, wnames, name, tags=tags)
        return node.output

    def upsample(self, x: str, factor: int, name: str, tags: dict | None = None) -> str:
        if int(factor) != factor or factor < 1:
            raise SpecError(f"upsample factor must be an integer >= 1, got {factor}")
        return self.add_node("upsample", [x], {"factor": int(factor)}, (), name, tags=tags).output

    def gap(self, x: str, name: str, tags: dict | None = None) -> str:
        return self.add_node("gap", [x], {}, (), name, tags=tags).output

    def squeeze_excite(self, x: str, reduction: int, name: str, weights: Sequence | None = None,
                       tags: dict | None = None) -> str:
        wnames = [f"{name}.{k}" for k in ("w1", "b1", "w2", "b2")]
        if weights is not None:
            for k, v in zip(wnames, weights):
                self.set_weight(k, v)
        return self.add_node("squeeze_excite", [x], {"reduction": int(reduction)}, wnames, name,
                             tags=tags).output

    def add(self, a: str, b: str, name: str, tags: dict | None = None) -> str:
        return self.add_node("add", [a, b], {}, (), name, tags=tags).output

    def activation(self, x: str, kind: ActKind, name: str, tags: dict | None = None) -> str:
        return self.add_node("activation", [x], {"kind": ActKind(kind)}, (), name, tags=tags).output

    # -- queries ------------------------------------------------------------

    def node_list(self) -> list[OpNode]:
        return [self.nodes[i] for i in sorted(self.nodes)]

    def producer(self, tensor: str) -> OpNode | None:
        nid = self._producer.get(tensor)
        return None if nid is None else self.nodes[nid]

    def consumers(self, tensor: str) -> list[OpNode]:
        return [n for n in self.node_list() if tensor in n.inputs]

    def by_name(self, name: str) -> OpNode:
        for n in self.nodes.values():
            if n.name == name:
                return n
        raise KeyError(name)

    def find(self, **tags) -> list[OpNode]:
        return [n for n in self.node_list() if all(n.tags.get(k) == v for k, v in tags.items())]

    def copy(self) -> "Graph":
        g = Graph()
        g.nodes = {i: copy.deepcopy(n) for i, n in self.nodes.items()}
        g.tensors = dict(self.tensors)
        g.weights = dict(self.weights)  # arrays are shared, never mutated in place
        g.inputs = list(self.inputs)
        g.outputs = list(self.outputs)
        g._next_id = self._next_id
        g._producer = dict(self._producer)
        return g

    def validate(self) -> None:
        """Check that every edge is resolvable and shapes agree along it."""
        for node in self.node_list():
            for t in node.inputs:
                if t not in self.tensors:
                    raise GraphError(f"node {node.name!r} reads unknown tensor {t!r}")
            expected = infer_shapes(node.kind, node.attrs, [self.tensors[t] for t in node.inputs])
            actual = [self.tensors[t] for t in node.outputs]
            if expected != actual:
                raise GraphError(f"node {node.name!r}: output shapes {actual} != inferred {expected}")
        topo_schedule(self)

    def summary(self) -> str:
        """One line per node: ``id kind output_shape params macs``."""
        from .analysis import count_node

        lines = []
        for node in topo_schedule(self):
            cost = count_node(node, self)
            shape = ",".join(str(self.tensors[t]) for t in node.outputs)
            lines.append(f"{node.id} {node.kind} {shape} {cost.params} {cost.macs}")
        return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# scheduling


def _dependencies(g: Graph) -> dict[int, set[int]]:
    deps = {}
    for node in g.nodes.values():
        deps[node.id] = {g._producer[t] for t in node.inputs if t in g._producer}
    return deps


def topo_schedule(g: Graph) -> list[OpNode]:
    """Kahn's algorithm; among ready nodes the smallest id runs first."""
    deps = _dependencies(g)
    users: dict[int, list[int]] = {i: [] for i in deps}
    for i, ds in deps.items():
        for d in ds:
            users[d].append(i)
    remaining = {i: len(ds) for i, ds in deps.items()}
    ready = [i for i, r in remaining.items() if r == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        i = heapq.heappop(ready)
        order.append(g.nodes[i])
        for u in users[i]:
            remaining[u] -= 1
            if remaining[u] == 0:
                heapq.heappush(ready, u)
    if len(order) != len(deps):
        stuck = sorted(i for i, r in remaining.items() if r > 0)
        raise GraphError(f"graph has a cycle through nodes {stuck}")
    return order


def is_valid_schedule(g: Graph, order: Sequence[OpNode]) -> bool:
    pos = {n.id: k for k, n in enumerate(order)}
    if sorted(pos) != sorted(g.nodes):
        return False
    return all(pos[d] < pos[i] for i, ds in _dependencies(g).items() for d in ds)


# ---------------------------------------------------------------------------
# multi-output fusion


def _fusible(node: OpNode) -> bool:
    return node.kind == "conv" and node.attrs["spec"].is_pointwise


def find_fusion_groups(g: Graph) -> list[FusionGroup]:
    groups = []
    for tensor in list(g.tensors):
        buckets: dict[tuple, list[OpNode]] = {}
        for node in g.consumers(tensor):
            if _fusible(node):
                spec = node.attrs["spec"]
                buckets.setdefault((spec.stride, spec.padding), []).append(node)
        for members in buckets.values():
            if len(members) > 1:
                ids = [m.id for m in members]
                groups.append(FusionGroup(ids, min(ids), tensor))
    return groups


def fuse_mrt(g: Graph) -> Graph:
    """Merge sibling 1x1 convolutions reading one tensor into multi-output nodes."""
    out = g.copy()
    for group in find_fusion_groups(g):
        members = [out.nodes.pop(i) for i in group.members]
        for m in members:
            for t in m.outputs:
                del out._producer[t]
        specs = [m.attrs["spec"] for m in members]
        attrs = {"specs": specs, "acts": [m.attrs["act"] for m in members]}
        outputs = [m.output for m in members]
        node = OpNode(
            group.fused_id,
            "mrt(" + ",".join(m.name for m in members) + ")",
            "conv_multi",
            [group.input],
            outputs,
            [w for m in members for w in m.weights],
            attrs,
            {"fused": [m.name for m in members]},
        )
        out.nodes[node.id] = node
        for t in outputs:
            out._producer[t] = node.id
    return out


# ---------------------------------------------------------------------------
# layout planning


class LayoutProfile(enum.Enum):
    REFERENCE = "reference"
    PACKED = "packed"


def plan_layouts(g: Graph, profile: LayoutProfile | str = LayoutProfile.REFERENCE) -> dict[str, Layout]:
    profile = LayoutProfile(profile)
    if profile is LayoutProfile.REFERENCE:
        return {t: Layout.INTERLEAVED for t in g.tensors}
    boundary = set(g.inputs) | set(g.outputs)
    return {t: Layout.INTERLEAVED if t in boundary else Layout.PACKED4 for t in g.tensors}


# ---------------------------------------------------------------------------
# execution


class BufferPool:
    """Hands out physical buffers, recycling ones whose tensors are dead."""

    def __init__(self):
        self.free: list[PhysicalBuffer] = []
        self.allocated = 0
        self.reused = 0
        self.live_bytes = 0
        self.peak_bytes = 0

    def acquire(self, extent: int) -> PhysicalBuffer:
        fits = [b for b in self.free if b.capacity >= extent]
        if fits:
            buf = min(fits, key=lambda b: (b.capacity, b.id))
            self.free.remove(buf)
            buf.storage[:] = 0.0
            self.reused += 1
        else:
            buf = PhysicalBuffer(extent)
            self.allocated += 1
        self.live_bytes += buf.byte_len
        self.peak_bytes = max(self.peak_bytes, self.live_bytes)
        return buf

    def release(self, buf: PhysicalBuffer) -> None:
        self.live_bytes -= buf.byte_len
        self.free.append(buf)


class Executor:
    """Sequential reference executor.

    Intermediate buffers go back to the pool as soon as their last consumer
    has run, so tensors with disjoint lifetimes share physical storage.
    """

    def __init__(self, graph: Graph, plan: Mapping[str, Layout] | None = None,
                 schedule: Sequence[OpNode] | None = None):
        self.graph = graph
        self.plan = dict(plan) if plan is not None else plan_layouts(graph)
        missing = set(graph.tensors) - set(self.plan)
        if missing:
            raise ExecutionError(f"layout plan misses tensors {sorted(missing)[:5]}")
        if schedule is None:
            schedule = topo_schedule(graph)
        elif not is_valid_schedule(graph, schedule):
            raise GraphError("schedule violates graph dependencies")
        self.schedule = list(schedule)
        self.weights_used: set[str] = set()
        self.pool = BufferPool()

    def _weight(self, name: str) -> np.ndarray:
        try:
            w = self.graph.weights[name]
        except KeyError:
            raise ExecutionError(f"missing weight {name!r}") from None
        self.weights_used.add(name)
        return w

    def _alloc(self, tensor: str) -> LogicalTensor:
        shape, layout = self.graph.tensors[tensor], self.plan[tensor]
        return LogicalTensor(shape, layout, self.pool.acquire(layout.extent(shape)))

    def run(self, inputs: Mapping[str, object]) -> dict[str, LogicalTensor]:
        g = self.graph
        values: dict[str, LogicalTensor] = {}
        for name in g.inputs:
            if name not in inputs:
                raise ExecutionError(f"missing graph input {name!r}")
            arr = inputs[name]
            arr = arr.numpy() if isinstance(arr, LogicalTensor) else np.asarray(arr, dtype=DTYPE)
            if arr.shape != g.tensors[name].as_tuple():
                raise ExecutionError(
                    f"input {name!r} has shape {arr.shape}, graph expects {g.tensors[name]}"
                )
            values[name] = self._alloc(name).assign(arr)

        pending = {t: 0 for t in g.tensors}
        for node in self.schedule:
            for t in node.inputs:
                pending[t] += 1
        keep = set(g.outputs)

        for node in self.schedule:
            args = [values[t].numpy() for t in node.inputs]
            results = self._compute(node, args)
            for t, r in zip(node.outputs, results):
                values[t] = self._alloc(t).assign(r)
            for t in node.inputs:
                pending[t] -= 1
                if pending[t] == 0 and t not in keep:
                    self.pool.release(values.pop(t).buffer)
            for t in node.outputs:
                if pending[t] == 0 and t not in keep:
                    self.pool.release(values.pop(t).buffer)
        return {t: values[t] for t in g.outputs}

    def _compute(self, node: OpNode, args: list[np.ndarray]) -> list[np.ndarray]:
        kind, a = node.kind, node.attrs
        if kind == "conv":
            spec = a["spec"]
            w = self._weight(node.weights[0])
            b = self._weight(node.weights[1]) if spec.has_bias else None
            return [ops.activation_nhwc(ops.conv2d_nhwc(args[0], w, b, spec), a["act"])]
        if kind == "conv_multi":
            return self._conv_multi(node, args[0])
        if kind == "upsample":
            return [ops.upsample_nhwc(args[0], a["factor"])]
        if kind == "gap":
            return [ops.global_avg_pool_nhwc(args[0])]
        if kind == "squeeze_excite":
            w1, b1, w2, b2 = (self._weight(n) for n in node.weights)
            return [ops.squeeze_excite_nhwc(args[0], w1, b1, w2, b2, a["reduction"])]
        if kind == "add":
            return [ops.add_nhwc(args[0], args[1])]
        if kind == "activation":
            return [ops.activation_nhwc(args[0], a["kind"])]
        raise ExecutionError(f"cannot execute op kind {kind!r}")

    def _conv_multi(self, node: OpNode, x: np.ndarray) -> list[np.ndarray]:
        specs, acts = node.attrs["specs"], node.attrs["acts"]
        names = iter(node.weights)
        ws, bs = [], []
        for spec in specs:
            ws.append(self._weight(next(names)))
            bs.append(self._weight(next(names)) if spec.has_bias else None)
        first = specs[0]
        merged = ConvSpec(first.kernel, first.stride, first.padding, 1, first.cin,
                          sum(s.cout for s in specs), has_bias=False)
        full = ops.conv2d_nhwc(x, np.concatenate(ws, axis=0), None, merged)
        outs, start = [], 0
        for spec, b, act in zip(specs, bs, acts):
            part = full[..., start : start + spec.cout]
            if b is not None:
                part = part + b
            outs.append(ops.activation_nhwc(part, act))
            start += spec.cout
        return outs


def execute(g: Graph, inputs: Mapping[str, object], plan: Mapping[str, Layout] | None = None,
            schedule: Sequence[OpNode] | None = None) -> dict[str, np.ndarray]:
    """Run ``g`` and return its outputs as ``(n, h, w, c)`` arrays."""
    result = Executor(g, plan, schedule).run(inputs)
    return {k: v.numpy() for k, v in result.items()}
