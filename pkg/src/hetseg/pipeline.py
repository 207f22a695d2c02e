"""Discrete-event simulator for a heterogeneous camera-to-render pipeline.

A pipeline is a chain of stages, each pinned to one processor. Between
consecutive stages a transfer edge either copies the frame (a fixed delay
that occupies no processor) or shares the buffer (no delay). Two
synchronisation modes are modelled:

``blocking``
    One frame traverses the whole chain before the next one is captured.
``fence_async``
    Stages overlap across frames. The camera captures a frame every period
    (by default the largest per-frame load of any single processor) and each
    stage runs in a fixed slot of a periodic timetable, after its input fence
    has signalled. The timetable is the one with the smallest capture-to-done
    latency among all conflict-free periodic schedules, so adding transfer
    delay can never make a frame finish sooner.

Every processor runs one stage at a time. Latency runs from capture to the
end of the last stage. Time is kept in integer microsecond ticks and
reported in milliseconds.
"""
from __future__ import annotations

import copy
import csv
import enum
import functools
import heapq
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

from .exceptions import ConfigError

TICKS_PER_MS = 1000


def to_ticks(ms: float) -> int:
    return int(round(ms * TICKS_PER_MS))


class TransferMode(enum.Enum):
    COPY = "copy"
    SHARED = "shared"


class SyncMode(enum.Enum):
    BLOCKING = "blocking"
    FENCE_ASYNC = "fence_async"


@dataclass
class Processor:
    name: str
    active_power: float
    idle_power: float = 0.0

    def __post_init__(self):
        if not self.active_power >= self.idle_power >= 0:
            raise ConfigError(f"processor {self.name!r}: need active_power >= idle_power >= 0")


@dataclass
class Stage:
    name: str
    processor: str
    compute_time: float

    def __post_init__(self):
        if not self.compute_time > 0:
            raise ConfigError(f"stage {self.name!r}: compute_time must be > 0")


@dataclass
class TransferEdge:
    src: str
    dst: str
    mode: TransferMode = TransferMode.SHARED
    cost: float = 0.0

    def __post_init__(self):
        self.mode = TransferMode(self.mode)
        if self.mode is TransferMode.SHARED:
            self.cost = 0.0
        elif self.cost < 0:
            raise ConfigError(f"edge {self.src}->{self.dst}: copy cost must be >= 0")


@dataclass
class PipelineConfig:
    processors: list[Processor]
    stages: list[Stage]
    edges: list[TransferEdge] = field(default_factory=list)
    sync_mode: SyncMode = SyncMode.BLOCKING
    n_frames: int = 100
    source_period: float | None = None
    name: str = ""

    def __post_init__(self):
        self.sync_mode = SyncMode(self.sync_mode)
        if self.n_frames < 1:
            raise ConfigError("n_frames must be >= 1")
        if self.source_period is not None and not self.source_period > 0:
            raise ConfigError("source_period must be > 0")

    # -- topology -----------------------------------------------------------

    def chain(self) -> tuple[list[Stage], list[TransferEdge]]:
        """Stages in chain order and the edge leaving each (all but the last)."""
        procs = {p.name for p in self.processors}
        if len(procs) != len(self.processors):
            raise ConfigError("duplicate processor names")
        by_name = {s.name: s for s in self.stages}
        if not self.stages or len(by_name) != len(self.stages):
            raise ConfigError("stages must be non-empty with unique names")
        for s in self.stages:
            if s.processor not in procs:
                raise ConfigError(f"stage {s.name!r} runs on unknown processor {s.processor!r}")
        out, indeg = {}, {name: 0 for name in by_name}
        for e in self.edges:
            if e.src not in by_name or e.dst not in by_name:
                raise ConfigError(f"edge {e.src}->{e.dst} references an unknown stage")
            if e.src in out:
                raise ConfigError(f"stage {e.src!r} has more than one successor; only chains are supported")
            out[e.src] = e
            indeg[e.dst] += 1
        heads = [name for name, d in indeg.items() if d == 0]
        if len(heads) != 1 or any(d > 1 for d in indeg.values()):
            raise ConfigError("stage graph is not a single chain")
        order, edges, cur, seen = [], [], heads[0], set()
        while True:
            if cur in seen:
                raise ConfigError("stage graph contains a cycle")
            seen.add(cur)
            order.append(by_name[cur])
            if cur not in out:
                break
            edges.append(out[cur])
            cur = out[cur].dst
        if len(order) != len(self.stages):
            raise ConfigError("stage graph is not a single connected chain")
        return order, edges

    def processor_loads(self) -> dict[str, int]:
        """Per-frame busy ticks of each processor."""
        loads = {p.name: 0 for p in self.processors}
        for s in self.stages:
            loads[s.processor] += to_ticks(s.compute_time)
        return loads

    def capture_period(self) -> int:
        """Ticks between fence_async captures (never faster than the bottleneck)."""
        bottleneck = max(self.processor_loads().values())
        if self.source_period is None:
            return bottleneck
        return max(bottleneck, to_ticks(self.source_period))

    # -- JSON ---------------------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "processors": [vars(p).copy() for p in self.processors],
            "stages": [vars(s).copy() for s in self.stages],
            "edges": [
                {"from": e.src, "to": e.dst, "mode": e.mode.value, "cost": e.cost} for e in self.edges
            ],
            "sync_mode": self.sync_mode.value,
            "n_frames": self.n_frames,
        }
        if self.source_period is not None:
            d["source_period"] = self.source_period
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        try:
            return cls(
                processors=[Processor(**p) for p in d["processors"]],
                stages=[Stage(**s) for s in d["stages"]],
                edges=[
                    TransferEdge(e["from"], e["to"], e.get("mode", "shared"), float(e.get("cost", 0.0)))
                    for e in d.get("edges", [])
                ],
                sync_mode=d.get("sync_mode", "blocking"),
                n_frames=int(d.get("n_frames", 100)),
                source_period=d.get("source_period"),
                name=d.get("name", ""),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid pipeline config: {exc!r}") from exc


@dataclass
class SimReport:
    name: str
    n_frames: int
    e2e_latency: float
    throughput: float
    busy: dict[str, float]
    idle: dict[str, float]
    energy_per_frame: float
    makespan: float
    latencies: list[float] = field(default_factory=list, repr=False)

    @property
    def average_power(self) -> float:
        """Mean power draw in watts over the whole run."""
        return self.energy_per_frame * self.n_frames / self.makespan


def _longest_paths(n: int, edges: list, sig: list[int]) -> list[int] | None:
    """Smallest start times meeting ``sig[v] >= sig[u] + w``; None if inconsistent."""
    sig = list(sig)
    for _ in range(n + 1):
        changed = False
        for u, v, w in edges:
            if sig[u] + w > sig[v]:
                sig[v] = sig[u] + w
                changed = True
        if not changed:
            return sig
    return None


@functools.lru_cache(maxsize=4096)
def periodic_timetable(dur: tuple, delay: tuple, proc: tuple, period: int) -> tuple:
    """Start offsets (ticks after capture) of a minimum-latency periodic schedule.

    Stage ``s`` of frame ``f`` runs over ``[f*period + t[s], ... + dur[s])``.
    Stages sharing a processor must occupy disjoint arcs modulo ``period``.
    Branch and bound: stages are added in chain order, each inserted into a
    gap of its processor's circular slot order with a winding count, and
    the resulting difference constraints are solved by longest paths. The
    search is exact; its cost grows quickly with the number of stages that
    share one processor.
    """
    n = len(dur)
    base = [(i, i + 1, dur[i] + delay[i]) for i in range(n - 1)]
    tail = [0] * n
    for i in range(n - 2, -1, -1):
        tail[i] = tail[i + 1] + dur[i] + delay[i]

    # incumbent: each processor's stages packed back to back in chain order
    phase, used, start = {}, {}, []
    for i in range(n):
        ready = 0 if i == 0 else start[-1] + dur[i - 1] + delay[i - 1]
        if proc[i] not in phase:
            phase[proc[i]], used[proc[i]] = ready, 0
        slot = phase[proc[i]] + used[proc[i]]
        used[proc[i]] += dur[i]
        start.append(ready + (slot - ready) % period)
    best = [start[-1], start]

    ring: dict = {}
    wind: dict = {}

    def search(t, edges, sig):
        if t == n:
            if sig[-1] < best[0]:
                best[0], best[1] = sig[-1], sig
            return
        if sig[t] + tail[t] >= best[0]:
            return
        p = proc[t]
        if p not in ring:
            ring[p] = [t]
            wind[t] = 0
            search(t + 1, edges, sig)
            del ring[p]
            return
        order = ring[p]
        anchor = order[0]
        m_lo = max(0, (sig[t] - sig[anchor]) // period - 1)
        for q in range(1, len(order) + 1):
            rank = {s: i for i, s in enumerate(order)}
            m = m_lo
            while True:
                extra = []
                for s in order:
                    k = m - wind[s] - (0 if q > rank[s] else 1)
                    extra.append((s, t, dur[s] + k * period))
                    extra.append((t, s, dur[t] - (k + 1) * period))
                cand = _longest_paths(n, edges + extra, sig)
                if cand is not None:
                    if cand[t] + tail[t] >= best[0]:
                        break
                    order.insert(q, t)
                    wind[t] = m
                    search(t + 1, edges + extra, cand)
                    order.pop(q)
                elif m * period > best[0] + period:
                    break
                m += 1

    search(0, base, _longest_paths(n, base, [0] * n))
    return tuple(best[1])


def simulate(cfg: PipelineConfig, n_frames: int | None = None) -> SimReport:
    n = cfg.n_frames if n_frames is None else int(n_frames)
    if n < 1:
        raise ConfigError("n_frames must be >= 1")
    stages, edges = cfg.chain()
    n_st = len(stages)
    dur = [to_ticks(s.compute_time) for s in stages]
    delay = [to_ticks(e.cost) for e in edges]
    proc_names = [p.name for p in cfg.processors]
    proc_of = [s.processor for s in stages]
    blocking = cfg.sync_mode is SyncMode.BLOCKING
    min_gap = 0 if cfg.source_period is None else to_ticks(cfg.source_period)
    if blocking:
        period, slots = None, None
    else:
        period = cfg.capture_period()
        slots = periodic_timetable(tuple(dur), tuple(delay), tuple(proc_of), period)

    pending: dict[str, list[tuple[int, int, int]]] = {p: [] for p in proc_names}
    idle_proc = {p: True for p in proc_names}
    busy = {p: 0 for p in proc_names}
    events: list[tuple[int, int, int, int]] = []  # (time, kind, frame, stage); kind 0=done 1=ready
    captured = [0] * n
    done = [0] * n

    def make_job(frame, stage, fence, now):
        # under fence_async the stage also waits for its timetable slot
        ready = fence if blocking else max(fence, captured[frame] + slots[stage])
        pending[proc_of[stage]].append((frame, stage, ready))
        if ready > now:
            heapq.heappush(events, (ready, 1, frame, stage))

    def capture(frame, at, now):
        captured[frame] = at
        make_job(frame, 0, at, now)

    def dispatch(now):
        for p in proc_names:
            if not idle_proc[p]:
                continue
            ready = [j for j in pending[p] if j[2] <= now]
            if not ready:
                continue
            job = min(ready)
            pending[p].remove(job)
            frame, stage, at = job
            if not blocking and at != now:
                raise RuntimeError(f"timetable slot missed by stage {stage} of frame {frame}")
            idle_proc[p] = False
            busy[p] += dur[stage]
            heapq.heappush(events, (now + dur[stage], 0, frame, stage))

    if blocking:
        capture(0, 0, 0)
    else:
        for f in range(n):
            capture(f, f * period, 0)
    dispatch(0)
    completed = 0
    while completed < n:
        now = events[0][0]
        while events and events[0][0] == now:
            _, kind, frame, stage = heapq.heappop(events)
            if kind == 1:
                continue
            idle_proc[proc_of[stage]] = True
            if stage + 1 < n_st:
                make_job(frame, stage + 1, now + delay[stage], now)
            else:
                done[frame] = now
                completed += 1
                if blocking and frame + 1 < n:
                    capture(frame + 1, max(now, captured[frame] + min_gap), now)
        dispatch(now)

    makespan = max(done)
    m = max(1, n // 2)
    window = range(n - m, n)
    latencies = [(done[f] - captured[f]) / TICKS_PER_MS for f in range(n)]
    e2e = sum(latencies[f] for f in window) / m
    if n >= 2:
        throughput = m * 1000.0 * TICKS_PER_MS / (done[n - 1] - done[n - 1 - m])
    else:
        throughput = 1000.0 * TICKS_PER_MS / done[0]
    power = {p.name: p for p in cfg.processors}
    busy_ms = {p: busy[p] / TICKS_PER_MS for p in proc_names}
    idle_ms = {p: (makespan - busy[p]) / TICKS_PER_MS for p in proc_names}
    energy = sum(
        busy_ms[p] * power[p].active_power + idle_ms[p] * power[p].idle_power for p in proc_names
    )
    return SimReport(
        name=cfg.name,
        n_frames=n,
        e2e_latency=e2e,
        throughput=throughput,
        busy=busy_ms,
        idle=idle_ms,
        energy_per_frame=energy / n,
        makespan=makespan / TICKS_PER_MS,
        latencies=latencies,
    )


# ---------------------------------------------------------------------------
# tables


@dataclass
class Table:
    header: list[str]
    rows: list[list]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header)
        writer.writerows([[_fmt(v) for v in r] for r in self.rows])
        return buf.getvalue()

    def to_text(self) -> str:
        cells = [self.header] + [[_fmt(v) for v in r] for r in self.rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(self.header))]
        lines = [
            "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
            for r in cells
        ]
        return "\n".join(lines) + "\n"

    def column(self, name: str) -> list:
        i = self.header.index(name)
        return [r[i] for r in self.rows]


def _fmt(v) -> str:
    return f"{v:.3f}" if isinstance(v, float) else str(v)


REPORT_COLUMNS = ["latency_ms", "throughput_fps", "energy_mj", "power_w"]


def _report_cells(r: SimReport) -> list:
    return [r.e2e_latency, r.throughput, r.energy_per_frame, r.average_power]


def compare(cfgs: Sequence, n_frames: int | None = None) -> Table:
    """Simulate each config; ratios are relative to the first (baseline) row.

    ``cfgs`` holds PipelineConfigs or ``(name, PipelineConfig)`` pairs.
    """
    named = [c if isinstance(c, tuple) else (c.name, c) for c in cfgs]
    if len(named) < 2:
        raise ConfigError("compare needs at least two configs")
    reports = [(name, simulate(c, n_frames)) for name, c in named]
    base = reports[0][1]
    rows = []
    for name, r in reports:
        rows.append([
            name, *_report_cells(r),
            r.throughput / base.throughput,
            r.e2e_latency / base.e2e_latency,
            r.energy_per_frame / base.energy_per_frame,
            r.average_power / base.average_power,
        ])
    header = ["config", *REPORT_COLUMNS, "throughput_ratio", "latency_ratio", "energy_ratio", "power_ratio"]
    return Table(header, rows)


def _with_parameter(cfg: PipelineConfig, parameter: str, value) -> PipelineConfig:
    c = copy.deepcopy(cfg)
    if parameter == "n_frames":
        c.n_frames = int(value)
    elif parameter == "sync_mode":
        c.sync_mode = SyncMode(value)
    elif parameter == "source_period":
        c.source_period = None if value is None else float(value)
    elif parameter == "copy_cost":
        for e in c.edges:
            if e.mode is TransferMode.COPY:
                e.cost = float(value)
    elif parameter == "transfer_mode":
        mode = TransferMode(value)
        c.edges = [TransferEdge(e.src, e.dst, mode, e.cost) for e in c.edges]
    elif parameter.startswith("stage:"):
        target = parameter[len("stage:"):]
        stages = [s for s in c.stages if s.name == target]
        if not stages:
            raise ConfigError(f"unknown stage {target!r}")
        stages[0].compute_time = float(value)
    elif parameter.startswith("power:"):
        target = parameter[len("power:"):]
        procs = [p for p in c.processors if p.name == target]
        if not procs:
            raise ConfigError(f"unknown processor {target!r}")
        procs[0].active_power = float(value)
    else:
        raise ConfigError(f"unknown sweep parameter {parameter!r}")
    c.__post_init__()
    return c


SWEEP_PARAMETERS = ("n_frames", "sync_mode", "source_period", "copy_cost", "transfer_mode",
                    "stage:<name>", "power:<processor>")


def sweep(cfg: PipelineConfig, parameter: str, values: Sequence) -> Table:
    """Re-simulate ``cfg`` with one field set to each of ``values``."""
    rows = []
    for v in values:
        r = simulate(_with_parameter(cfg, parameter, v))
        rows.append([str(v.value if isinstance(v, enum.Enum) else v), *_report_cells(r)])
    return Table([parameter, *REPORT_COLUMNS], rows)


# ---------------------------------------------------------------------------
# scenarios


@dataclass
class Scenario:
    configs: list[PipelineConfig]
    comment: str = ""
    targets: dict = field(default_factory=dict)

    def by_name(self, name: str) -> PipelineConfig:
        for c in self.configs:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"comment": self.comment, "targets": self.targets,
                "configs": [c.to_dict() for c in self.configs]}


def load_scenario(data: dict) -> Scenario:
    if "configs" in data:
        configs = [PipelineConfig.from_dict(c) for c in data["configs"]]
        return Scenario(configs, data.get("comment", ""), data.get("targets", {}))
    return Scenario([PipelineConfig.from_dict(data)])


def read_scenario(path) -> Scenario:
    try:
        with open(path) as fh:
            return load_scenario(json.load(fh))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def shipped_scenario(name: str = "m1_vs_m4") -> Scenario:
    from importlib.resources import files

    return load_scenario(json.loads(files("hetseg").joinpath("data", f"{name}.json").read_text()))


def _bisect_ticks(f, lo: int, hi: int, target: float, increasing: bool) -> int:
    """Smallest integer tick ``t`` in [lo, hi] where f crosses target, then the closer neighbour."""
    def past(t):
        return f(t) >= target if increasing else f(t) <= target

    while hi - lo > 1:
        mid = (lo + hi) // 2
        if past(mid):
            hi = mid
        else:
            lo = mid
    return min((lo, hi), key=lambda t: abs(f(t) - target))


def calibrate(scenario: Scenario, baseline: str, final: str, stage: str, power_processor: str,
              throughput: float, speedup: float, energy_ratio: float) -> Scenario:
    """Fit the inference-stage times and one active power to the target numbers.

    1. the final config's ``stage`` time so its throughput equals ``throughput``;
    2. the baseline config's ``stage`` time so final/baseline throughput equals ``speedup``;
    3. ``power_processor``'s active power (shared by every config) so the final
       config's energy per frame is ``energy_ratio`` of the baseline's.
    """
    sc = copy.deepcopy(scenario)
    base, fin = sc.by_name(baseline), sc.by_name(final)

    def stage_of(c):
        return next(s for s in c.stages if s.name == stage)

    def fps_at(c, t):
        stage_of(c).compute_time = t / TICKS_PER_MS
        return simulate(c).throughput

    t_fin = _bisect_ticks(lambda t: fps_at(fin, t), 1, 10_000_000, throughput, increasing=False)
    stage_of(fin).compute_time = t_fin / TICKS_PER_MS
    fps_fin = simulate(fin).throughput
    t_base = _bisect_ticks(lambda t: fps_at(base, t), 1, 10_000_000, fps_fin / speedup, increasing=False)
    stage_of(base).compute_time = t_base / TICKS_PER_MS
    # intermediate variants run the same model on the same processor as one endpoint
    for c in sc.configs:
        s = stage_of(c)
        if s.processor == stage_of(fin).processor:
            s.compute_time = t_fin / TICKS_PER_MS
        elif s.processor == stage_of(base).processor:
            s.compute_time = t_base / TICKS_PER_MS

    def set_power(mw):
        for c in sc.configs:
            for p in c.processors:
                if p.name == power_processor:
                    p.active_power = mw / 1000.0

    def ratio_at(mw):
        set_power(mw)
        return simulate(fin).energy_per_frame / simulate(base).energy_per_frame

    idle = next(p.idle_power for p in fin.processors if p.name == power_processor)
    mw = _bisect_ticks(ratio_at, int(round(idle * 1000)), 100_000, energy_ratio, increasing=True)
    set_power(mw)
    sc.targets = {"baseline": baseline, "final": final, "stage": stage, "power_processor": power_processor,
                  "throughput": throughput, "speedup": speedup, "energy_ratio": energy_ratio}
    return sc
