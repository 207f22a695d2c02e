import copy
import json

import numpy as np
import pytest
from scipy.optimize import Bounds, LinearConstraint, milp

from hetseg import pipeline
from hetseg.exceptions import ConfigError
from hetseg.pipeline import (PipelineConfig, Processor, Stage, SyncMode, TransferEdge, compare,
                             periodic_timetable, simulate, sweep, to_ticks)

import cases


def two_stage(mode="copy", sync="blocking", cost=2.0, n_frames=100):
    return PipelineConfig(
        [Processor("gpu", 3.0, 0.1), Processor("npu", 2.0, 0.05)],
        [Stage("a", "gpu", 10.0), Stage("b", "npu", 5.0)],
        [TransferEdge("a", "b", mode, cost)],
        sync, n_frames,
    )


def test_single_stage():
    r = simulate(PipelineConfig([Processor("cpu", 1.0)], [Stage("s", "cpu", 10.0)]))
    assert r.e2e_latency == 10.0 and r.throughput == 100.0


def test_hand_trace_copy_blocking():
    r = simulate(two_stage())
    assert r.e2e_latency == 17.0
    assert r.throughput == pytest.approx(1000 / 17, abs=1e-9)
    assert round(r.throughput, 1) == 58.8


def test_hand_trace_shared_async():
    r = simulate(two_stage("shared", "fence_async"))
    assert (r.e2e_latency, r.throughput) == (15.0, 100.0)


def test_copy_async_keeps_bottleneck_rate():
    r = simulate(two_stage("copy", "fence_async"))
    assert (r.e2e_latency, r.throughput) == (17.0, 100.0)


def test_source_period_throttles_capture():
    for sync in ("blocking", "fence_async"):
        c = two_stage(sync=sync)
        c.source_period = 25.0
        assert simulate(c).throughput == pytest.approx(40.0)


def test_energy_accounting():
    r = simulate(two_stage(n_frames=10))
    assert r.busy == {"gpu": 100.0, "npu": 50.0}
    assert r.makespan == 170.0
    want = (100 * 3.0 + 70 * 0.1 + 50 * 2.0 + 120 * 0.05) / 10
    assert r.energy_per_frame == pytest.approx(want)
    assert r.average_power == pytest.approx(want * 10 / 170)


@pytest.mark.parametrize("bad", [
    lambda c: c.edges.append(TransferEdge("a", "a")),
    lambda c: c.stages.append(Stage("c", "gpu", 1.0)) or c.edges.append(TransferEdge("a", "c")),
    lambda c: c.stages.append(Stage("c", "gpu", 1.0)),
    lambda c: c.edges.append(TransferEdge("b", "a")),
    lambda c: c.stages.append(Stage("c", "dsp", 1.0)) or c.edges.append(TransferEdge("b", "c")),
])
def test_non_chain_is_config_error(bad):
    c = two_stage()
    bad(c)
    with pytest.raises(ConfigError):
        simulate(c)


def test_invalid_fields():
    with pytest.raises(ConfigError):
        Stage("s", "cpu", 0.0)
    with pytest.raises(ConfigError):
        Processor("cpu", 0.1, 0.2)
    with pytest.raises(ConfigError):
        TransferEdge("a", "b", "copy", -1.0)
    with pytest.raises(ValueError):
        TransferEdge("a", "b", "teleport")
    with pytest.raises(ConfigError):
        simulate(two_stage(), 0)


def test_copy_cost_sweep_is_additive_under_blocking():
    t = sweep(two_stage(), "copy_cost", [0, 2, 4])
    assert t.column("latency_ms") == [15.0, 17.0, 19.0]


def test_sync_sweep_async_dominates():
    t = sweep(two_stage(), "sync_mode", ["blocking", "fence_async"])
    fps = t.column("throughput_fps")
    assert fps[1] >= fps[0]


def test_frame_count_sweep_is_stable():
    for sync in ("blocking", "fence_async"):
        fps = sweep(two_stage(sync=sync), "n_frames", [10, 1000]).column("throughput_fps")
        assert fps[1] == pytest.approx(fps[0], rel=0.01)


def test_unknown_sweep_parameter():
    with pytest.raises(ConfigError):
        sweep(two_stage(), "voltage", [1])
    with pytest.raises(ConfigError):
        sweep(two_stage(), "stage:nope", [1])


def test_random_dominance():
    assert cases.dominance_violations(150, seed=5) == (0, 0)


def test_async_throughput_equals_bottleneck_and_work_is_conserved():
    rng = np.random.default_rng(6)
    for _ in range(100):
        c = cases.random_chain(rng, "fence_async")
        r = simulate(c)
        loads = c.processor_loads()
        assert r.throughput == pytest.approx(1e6 / max(loads.values()), rel=0.01)
        for p, ticks in loads.items():
            assert round(r.busy[p] * 1000) == c.n_frames * ticks


def test_removing_copy_cost_never_increases_energy():
    rng = np.random.default_rng(7)
    for _ in range(100):
        c = cases.random_chain(rng, "blocking" if rng.random() < 0.5 else "fence_async", mode="copy")
        free = copy.deepcopy(c)
        for e in free.edges:
            e.cost = 0.0
        assert simulate(free).energy_per_frame <= simulate(c).energy_per_frame + 1e-9


def milp_latency(dur, delay, proc, period):
    """Minimum start of the last stage over conflict-free periodic timetables."""
    n = len(dur)
    pairs = [(s, t) for s in range(n) for t in range(s + 1, n) if proc[s] == proc[t]]
    nv = n + len(pairs)
    rows, lo, hi = [], [], []
    for s in range(n - 1):
        r = np.zeros(nv)
        r[s + 1], r[s] = 1, -1
        rows.append(r), lo.append(dur[s] + delay[s]), hi.append(np.inf)
    for j, (s, t) in enumerate(pairs):
        r = np.zeros(nv)
        r[t], r[s], r[n + j] = 1, -1, -period
        rows.append(r), lo.append(dur[s]), hi.append(period - dur[t])
    ub = sum(dur) + sum(delay) + n * period
    obj = np.zeros(nv)
    obj[n - 1] = 1
    res = milp(obj, constraints=LinearConstraint(np.array(rows), lo, hi) if rows else None,
               integrality=np.ones(nv),
               bounds=Bounds(np.zeros(nv), np.r_[np.full(n, ub), np.full(len(pairs), ub // period + 1)]),
               options={"mip_rel_gap": 0})
    assert res.success
    return round(res.x[n - 1])


def test_timetable_is_optimal_against_milp():
    rng = np.random.default_rng(8)
    for _ in range(60):
        n, n_proc = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        dur = tuple(int(v) for v in rng.integers(500, 20000, n))
        proc = tuple(int(v) for v in rng.integers(0, n_proc, n))
        delay = tuple(int(v) for v in rng.integers(0, 5000, n - 1))
        loads = {}
        for d, p in zip(dur, proc):
            loads[p] = loads.get(p, 0) + d
        period = max(loads.values())
        slots = periodic_timetable(dur, delay, proc, period)
        assert slots[-1] == milp_latency(dur, delay, proc, period)
        for s in range(n - 1):
            assert slots[s + 1] >= slots[s] + dur[s] + delay[s]
        for s in range(n):
            for t in range(s + 1, n):
                if proc[s] == proc[t]:
                    gap = (slots[t] - slots[s]) % period
                    assert dur[s] <= gap <= period - dur[t]


def test_compare():
    c = two_stage()
    t = compare([("a", c), ("b", copy.deepcopy(c))])
    for col in ("throughput_ratio", "latency_ratio", "energy_ratio", "power_ratio"):
        assert t.column(col) == [1.0, 1.0]
    with pytest.raises(ConfigError):
        compare([c])
    text = t.to_text()
    assert text.splitlines()[0].startswith("config") and len(text.splitlines()) == 3
    assert t.to_csv().splitlines()[1].startswith("a,17.000,58.824")


def test_shipped_scenario_hits_calibration_targets():
    sc = pipeline.shipped_scenario()
    assert [c.name for c in sc.configs] == ["m1_baseline", "m2_npu_copy", "m3_npu_shared", "m4_final"]
    t = compare(sc.configs)
    m4 = t.rows[-1]
    header = t.header
    assert m4[header.index("throughput_fps")] == pytest.approx(42.7, abs=0.5)
    assert m4[header.index("throughput_ratio")] == pytest.approx(1.81, abs=0.02)
    assert m4[header.index("energy_ratio")] == pytest.approx(0.74, abs=0.03)
    assert "42.7" in sc.comment


def test_scenario_json_round_trip(tmp_path):
    sc = pipeline.shipped_scenario()
    path = tmp_path / "s.json"
    path.write_text(json.dumps(sc.to_dict()))
    back = pipeline.read_scenario(path)
    assert back.to_dict() == sc.to_dict()
    single = pipeline.load_scenario(two_stage().to_dict())
    assert len(single.configs) == 1 and simulate(single.configs[0]).e2e_latency == 17.0
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"stages": []})
    path.write_text("{")
    with pytest.raises(ConfigError):
        pipeline.read_scenario(path)


def test_ticks():
    assert to_ticks(1.5) == 1500 and to_ticks(0.0004) == 0
    assert to_ticks(17) == 17000
    assert SyncMode("fence_async") is SyncMode.FENCE_ASYNC
