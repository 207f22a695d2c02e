import numpy as np
import pytest

from hetseg.exceptions import ExecutionError, GraphError
from hetseg.graph import (Executor, Graph, LayoutProfile, execute, find_fusion_groups, fuse_mrt,
                          is_valid_schedule, plan_layouts, topo_schedule)
from hetseg.ops import ActKind, ConvSpec
from hetseg.tensor import Layout
from hetseg.zoo import ModelConfig, build_model


def _w(rng, spec):
    return rng.uniform(-1, 1, spec.weight_shape), rng.uniform(-1, 1, spec.cout)


def siblings_graph(seed=0, extra_3x3=True):
    """Three 1x1 convs reading one tensor, plus optionally a 3x3 sibling."""
    rng = np.random.default_rng(seed)
    g = Graph()
    x = g.add_input("x", (1, 5, 6, 4))
    outs = []
    for i, cout in enumerate((3, 5, 2)):
        spec = ConvSpec.square(1, 4, cout)
        outs.append(g.conv(x, spec, f"pw{i}", ActKind.RELU6 if i else ActKind.IDENTITY, *_w(rng, spec)))
    if extra_3x3:
        spec = ConvSpec.square(3, 4, 6)
        outs.append(g.conv(x, spec, "k3", ActKind.SIGMOID, *_w(rng, spec)))
    g.mark_output(*outs)
    return g


def random_dag(n, seed):
    rng = np.random.default_rng(seed)
    g = Graph()
    tensors = [g.add_input("x", (1, 3, 3, 2))]
    for i in range(n):
        if len(tensors) > 1 and rng.random() < 0.4:
            a, b = rng.choice(len(tensors), 2, replace=False)
            tensors.append(g.add(tensors[a], tensors[b], f"n{i}"))
        else:
            src = tensors[rng.integers(len(tensors))]
            tensors.append(g.activation(src, ActKind.RELU6, f"n{i}"))
    g.mark_output(tensors[-1])
    return g


def test_single_node_schedule():
    g = Graph()
    g.activation(g.add_input("x", (1, 1, 1, 1)), ActKind.RELU6, "a")
    assert [n.name for n in topo_schedule(g)] == ["a"]


def test_diamond_schedule():
    g = Graph()
    x = g.add_input("x", (1, 2, 2, 1))
    a = g.activation(x, ActKind.RELU6, "a")
    b = g.activation(x, ActKind.SIGMOID, "b")
    g.add(a, b, "c")
    order = [n.name for n in topo_schedule(g)]
    assert order[-1] == "c" and set(order[:2]) == {"a", "b"}


@pytest.mark.parametrize("seed", range(5))
def test_random_dag_schedule_respects_dependencies(seed):
    g = random_dag(20, seed)
    order = topo_schedule(g)
    assert len(order) == 20 and is_valid_schedule(g, order)
    assert not is_valid_schedule(g, order[::-1])


def test_cycle_is_rejected():
    g = Graph()
    x = g.add_input("x", (1, 2, 2, 1))
    g.add_node("add", [x, "b"], name="a", out_shapes=[(1, 2, 2, 1)])
    g.add_node("activation", ["a"], {"kind": ActKind.RELU6}, name="b", out_shapes=[(1, 2, 2, 1)])
    with pytest.raises(GraphError):
        topo_schedule(g)


def test_duplicate_producer_and_unknown_input():
    g = Graph()
    x = g.add_input("x", (1, 2, 2, 1))
    g.activation(x, ActKind.RELU6, "a")
    with pytest.raises(GraphError):
        g.activation(x, ActKind.RELU6, "a")
    with pytest.raises(GraphError):
        g.activation("nope", ActKind.RELU6, "b")


def test_fusion_groups_only_pointwise_siblings():
    groups = find_fusion_groups(siblings_graph())
    assert len(groups) == 1 and len(groups[0].members) == 3


@pytest.mark.parametrize("layout", ["reference", "packed"])
def test_fuse_mrt_is_bit_exact(layout):
    g = siblings_graph()
    x = np.random.default_rng(9).uniform(-1, 1, (1, 5, 6, 4)).astype(np.float32)
    fused = fuse_mrt(g)
    kinds = sorted(n.kind for n in fused.node_list())
    assert kinds == ["conv", "conv_multi"]
    a = execute(g, {"x": x}, plan_layouts(g, layout))
    b = execute(fused, {"x": x}, plan_layouts(fused, layout))
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_fuse_mrt_fixpoint_without_fusible_siblings():
    g = siblings_graph()
    once = fuse_mrt(g)
    twice = fuse_mrt(once)
    assert [n.kind for n in twice.node_list()] == [n.kind for n in once.node_list()]
    lone = Graph()
    lone.conv(lone.add_input("x", (1, 2, 2, 2)), ConvSpec.square(1, 2, 2), "c")
    assert [n.kind for n in fuse_mrt(lone).node_list()] == ["conv"]


def test_fuse_mrt_on_model_is_bit_exact():
    g = build_model(ModelConfig(resolution=64, seed=3))
    fused = fuse_mrt(g)
    assert any(n.kind == "conv_multi" for n in fused.node_list())
    x = np.random.default_rng(1).uniform(-1, 1, (1, 64, 64, 3)).astype(np.float32)
    a = execute(g, {"image": x})
    b = execute(fused, {"image": x}, plan_layouts(fused, LayoutProfile.PACKED))
    assert a["mask"].tobytes() == b["mask"].tobytes()
    assert a["coarse_mask"].tobytes() == b["coarse_mask"].tobytes()


def test_plan_layouts():
    g = siblings_graph()
    assert set(plan_layouts(g).values()) == {Layout.INTERLEAVED}
    packed = plan_layouts(g, "packed")
    assert packed["x"] is Layout.INTERLEAVED
    assert all(packed[t] is Layout.INTERLEAVED for t in g.outputs)
    inner = random_dag(5, 0)
    assert Layout.PACKED4 in plan_layouts(inner, LayoutProfile.PACKED).values()


def test_layout_plans_give_identical_results():
    g = random_dag(20, 4)
    x = np.random.default_rng(2).uniform(-8, 8, (1, 3, 3, 2)).astype(np.float32)
    a = execute(g, {"x": x})
    b = execute(g, {"x": x}, plan_layouts(g, "packed"))
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_missing_weight_raises():
    g = Graph()
    g.conv(g.add_input("x", (1, 2, 2, 1)), ConvSpec.square(1, 1, 1), "c")
    g.mark_output("c")
    with pytest.raises(ExecutionError, match="c.w"):
        execute(g, {"x": np.zeros((1, 2, 2, 1))})


def test_missing_or_misshapen_input_raises():
    g = siblings_graph()
    with pytest.raises(ExecutionError):
        execute(g, {})
    with pytest.raises(ExecutionError):
        execute(g, {"x": np.zeros((1, 5, 6, 3))})


def test_executor_reuses_buffers_and_records_weights():
    g = random_dag(20, 1)
    ex = Executor(g)
    ex.run({"x": np.ones((1, 3, 3, 2))})
    assert ex.pool.reused > 0
    g2 = siblings_graph()
    ex2 = Executor(g2)
    ex2.run({"x": np.ones((1, 5, 6, 4))})
    assert ex2.weights_used == set(g2.weights)


def test_summary_format():
    g = Graph()
    g.conv(g.add_input("x", (1, 1, 1, 1)), ConvSpec.square(1, 1, 1), "c")
    assert g.summary() == "0 conv 1x1x1x1 2 1\n"
