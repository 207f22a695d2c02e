"""Regenerate src/hetseg/data/m1_vs_m4.json by calibrating the simulator.

Stage times other than inference, copy costs and the CPU/GPU powers are fixed
guesses for a phone-class SoC. The two inference times and the NPU active
power are then fitted by bisection so the final variant hits the target
throughput, speedup over the baseline, and energy-per-frame ratio.
"""
import json
import sys
from pathlib import Path

from hetseg.pipeline import calibrate, compare, load_scenario

PROCESSORS = [
    {"name": "cpu", "active_power": 1.2, "idle_power": 0.1},
    {"name": "gpu", "active_power": 3.0, "idle_power": 0.15},
    {"name": "npu", "active_power": 1.0, "idle_power": 0.05},
]


def variant(name, inference_on, inner_mode, sync_mode, inner_cost=1.2):
    stages = [
        {"name": "acquire", "processor": "cpu", "compute_time": 3.0},
        {"name": "preprocess", "processor": "gpu", "compute_time": 2.5},
        {"name": "inference", "processor": inference_on, "compute_time": 20.0},
        {"name": "postprocess", "processor": "gpu", "compute_time": 2.0},
        {"name": "render", "processor": "gpu", "compute_time": 3.0},
    ]
    cost = 0.0 if inner_mode == "shared" else inner_cost
    edges = [
        {"from": "acquire", "to": "preprocess", "mode": "copy", "cost": 1.5},
        {"from": "preprocess", "to": "inference", "mode": inner_mode, "cost": cost},
        {"from": "inference", "to": "postprocess", "mode": inner_mode, "cost": cost},
        {"from": "postprocess", "to": "render", "mode": "shared", "cost": 0.0},
    ]
    return {"name": name, "processors": PROCESSORS, "stages": stages, "edges": edges,
            "sync_mode": sync_mode, "n_frames": 1000}


def main(out):
    raw = {"configs": [
        variant("m1_baseline", "gpu", "copy", "blocking"),
        variant("m2_npu_copy", "npu", "copy", "blocking"),
        variant("m3_npu_shared", "npu", "shared", "blocking"),
        variant("m4_final", "npu", "shared", "fence_async"),
    ]}
    sc = calibrate(load_scenario(raw), baseline="m1_baseline", final="m4_final", stage="inference",
                   power_processor="npu", throughput=42.7, speedup=1.81, energy_ratio=0.74)
    sc.comment = (
        "Targets: final variant (NPU inference, shared buffers, fence-based async) runs 81% faster "
        "than the GPU baseline at 42.7 inferences/sec with 74% of its energy per frame. Inference "
        "times and NPU active power are fitted by bisection through the simulator; m2 and m3 are "
        "reconstructed single-change ablations, not published configurations."
    )
    Path(out).write_text(json.dumps(sc.to_dict(), indent=2) + "\n")
    print(compare(sc.configs).to_text())


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "src/hetseg/data/m1_vs_m4.json")
