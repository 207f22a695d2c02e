"""Acceptance suite: one PASS/FAIL line per criterion, printed even under capture."""
import time

import numpy as np
import pytest

from hetseg import pipeline, pnm
from hetseg.analysis import analyze
from hetseg.cli import main
from hetseg.graph import execute, fuse_mrt, plan_layouts
from hetseg.metrics import f_measure, iou
from hetseg.training import train_toy
from hetseg.zoo import Decoder, ModelConfig, build_model

import cases
import oracles


@pytest.fixture
def report(capsys):
    lines = []

    def emit(criterion, ok, detail, seconds=None, limit=None):
        timing = "" if seconds is None else f" [{seconds:.2f}s / limit {limit}s]"
        ok = bool(ok) and (seconds is None or seconds < limit)
        line = f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} {detail}{timing}"
        lines.append(ok)
        with capsys.disabled():
            print("\n" + line)
        return ok

    yield emit
    assert all(lines)


def cost(resolution=512, **kw):
    cfg = ModelConfig(resolution=resolution, **kw)
    return analyze(build_model(cfg, with_weights=False), resolution)


def test_1_resolution_scaling(report):
    t0 = time.perf_counter()
    base = cost(512).ops
    ratios = {r: cost(r).ops / base for r in (256, 384, 640)}
    dt = time.perf_counter() - t0
    want = {256: 0.250, 384: 0.563, 640: 1.563}
    for r, target in want.items():
        ok = abs(ratios[r] - target) <= 0.02 * target
        report("1", ok, f"OPs({r})/OPs(512) = {ratios[r]:.4f}, target {target} +/-2%")
    report("1", True, "runtime", dt, 1)


def test_2_width_scaling(report):
    t0 = time.perf_counter()
    one = cost()
    wide = {w: cost(width_multiplier=w) for w in (1.5, 2.0)}
    dt = time.perf_counter() - t0
    for w, target in ((1.5, 2.25), (2.0, 4.0)):
        for what, value in (("OPs", wide[w].ops / one.ops), ("size", wide[w].size_bytes / one.size_bytes)):
            ok = abs(value - target) <= 0.05 * target
            report("2", ok, f"{what}(w={w})/{what}(w=1.0) = {value:.4f}, target {target} +/-5%")
    report("2", True, "runtime", dt, 1)


def test_3_directional_checks(report):
    grp = cost(64, group_size=2).params
    dw = cost(64, conv_type="depthwise").params
    report("3", grp > dw, f"group(2) params {grp} > depthwise params {dw}")
    final = cost(512).params
    dw512 = cost(512, conv_type="depthwise").params
    report("3", final > dw512, f"group(16) params {final} > depthwise params {dw512} at 512")
    for dec in Decoder:
        g = build_model(ModelConfig(resolution=64, decoder=dec), with_weights=False)
        n_se = sum(n.kind == "squeeze_excite" and n.tags.get("role") != "head" for n in g.node_list())
        expect = dec is Decoder.CHANNEL_ATTENTION
        report("3", (n_se > 0) == expect, f"{dec.value}: {n_se} SE nodes outside the decoder head")


def test_4_operator_oracles(report):
    t0 = time.perf_counter()
    for name in cases.CASES:
        err = cases.max_error(name, 200)
        report("4", err <= 1e-5, f"{name}: 200 cases, max |err| {err:.2e} <= 1e-5")
    cfg = ModelConfig(resolution=64, decoder="channel_attention", seed=7)
    g = build_model(cfg)
    x = np.random.default_rng(7).uniform(-1, 1, (1, 64, 64, 3)).astype(np.float32)
    ref = execute(g, {"image": x})
    packed = execute(g, {"image": x}, plan_layouts(g, "packed"))
    same = all(ref[k].tobytes() == packed[k].tobytes() for k in ref)
    report("4", same, "Interleaved vs Packed4 execution bit-exact")
    fused = fuse_mrt(g)
    out = execute(fused, {"image": x}, plan_layouts(fused, "packed"))
    same = all(ref[k].tobytes() == out[k].tobytes() for k in ref)
    n_multi = sum(n.kind == "conv_multi" for n in fused.node_list())
    report("4", same and n_multi > 0, f"fuse_mrt ({n_multi} fused nodes) bit-exact")
    report("4", True, "runtime", time.perf_counter() - t0, 30)


def test_5_jaccard_gradient(report):
    err = cases.jaccard_fd_error(50)
    report("5", err < 1e-4, f"50 random 8x8 instances, max relative error {err:.2e} < 1e-4")


def test_6_metric_unit_values(report):
    gt = np.zeros((3, 3))
    gt[:2, :2] = 1
    pred = gt.copy()
    pred[1, 1], pred[2, 2] = 0, 1
    v = iou(pred, gt)
    report("6", v == 0.6, f"IoU 3-of-4 plus one false positive = {v} (exact 0.6)")
    sq = np.zeros((10, 10))
    sq[2:6, 2:6] = 1
    shifted = np.roll(sq, 1, axis=1)
    f, want = f_measure(shifted, sq, 0), oracles.f_measure(shifted, sq, 0)
    report("6", f == want == 0.5, f"F shifted 4x4 square, tol 0 = {f} (distance oracle {want})")
    z = np.zeros((5, 5))
    vals = (iou(z, z), f_measure(z, z), f_measure(z, sq[:5, :5], 0))
    report("6", vals == (1.0, 1.0, 0.0), f"empty conventions IoU/F/F-one-empty = {vals}")


def test_7_pipeline(report):
    t0 = time.perf_counter()
    table = pipeline.compare(pipeline.shipped_scenario().configs)
    m4 = dict(zip(table.header, table.rows[-1]))
    for key, target, tol in (("throughput_ratio", 1.81, 0.02), ("throughput_fps", 42.7, 0.5),
                             ("energy_ratio", 0.74, 0.03)):
        report("7", abs(m4[key] - target) <= tol, f"m4 {key} = {m4[key]:.4f}, target {target} +/-{tol}")
    procs = [pipeline.Processor("gpu", 3.0), pipeline.Processor("npu", 2.0)]
    stages = [pipeline.Stage("a", "gpu", 10.0), pipeline.Stage("b", "npu", 5.0)]
    blk = pipeline.simulate(pipeline.PipelineConfig(procs, stages, [pipeline.TransferEdge("a", "b", "copy", 2.0)]))
    ok = blk.e2e_latency == 17.0 and round(blk.throughput, 1) == 58.8
    report("7", ok, f"copy+blocking {blk.e2e_latency} ms / {blk.throughput:.2f} fps (17 / 58.8)")
    asy = pipeline.simulate(pipeline.PipelineConfig(procs, stages, [pipeline.TransferEdge("a", "b", "shared")],
                                                    "fence_async"))
    ok = (asy.e2e_latency, asy.throughput) == (15.0, 100.0)
    report("7", ok, f"shared+fence_async {asy.e2e_latency} ms / {asy.throughput:.2f} fps (15 / 100)")
    a, s = cases.dominance_violations(1000)
    report("7", a == 0 and s == 0, f"1000 random chains: {a} async<blocking, {s} shared>copy violations")
    report("7", True, "runtime", time.perf_counter() - t0, 10)


def test_8_toy_training(report):
    t0 = time.perf_counter()
    first, second = train_toy(steps=200, seed=0), train_toy(steps=200, seed=0)
    dt = time.perf_counter() - t0
    report("8", first.miou > 0.9, f"held-out mIoU after 200 steps = {first.miou:.4f} > 0.9")
    same = first.losses == second.losses and first.miou == second.miou
    report("8", same, "two runs with seed 0 identical")
    report("8", True, "runtime (two runs)", dt, 60)


def test_9_end_to_end_determinism(report, tmp_path):
    model = tmp_path / "model.json"
    model.write_text(ModelConfig(resolution=64, seed=11).to_json())
    img = tmp_path / "img.ppm"
    pnm.write(img, np.random.default_rng(3).integers(0, 256, (64, 64, 3), dtype=np.uint8))
    masks, codes = [], []
    for k in range(2):
        w = tmp_path / f"w{k}.bin"
        codes.append(main(["build", "--model", str(model), "--weights", str(w), "--out", str(tmp_path / "g.txt")]))
        m = tmp_path / f"mask{k}.pgm"
        codes.append(main(["infer", "--model", str(model), "--weights", str(w), "--in", str(img), "--out", str(m)]))
        masks.append(m.read_bytes())
    w_same = (tmp_path / "w0.bin").read_bytes() == (tmp_path / "w1.bin").read_bytes()
    ok = codes == [0] * 4 and masks[0] == masks[1] and w_same
    report("9", ok, f"build+infer twice: exit codes {codes}, weights and masks byte-identical = {ok}")
