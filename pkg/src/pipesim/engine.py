"""Discrete-event simulation of a pipeline schedule.

Every stage owns a compute lane (Forward/Backward) and a transfer lane
(Evict/Load). An op starts once all its dependencies have finished and its
lane is free. Time is kept in integer microseconds; cost-model seconds are
rounded half-up on entry. Pipeline stage-to-stage handoff is free.

Activation accounting per stage: +1 when a Forward ends, -1 when a Backward
ends. An Evict moves the activation to the peer when it starts; a Load moves
it back when it ends, so an activation is never counted on two devices.
"""

from __future__ import annotations

import heapq
import json
import math
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from pipesim.config import DeviceLayout, HardwareProfile, ModelConfig, ParallelConfig, contiguous_layout
from pipesim.costmodel import StageCost, model_flops
from pipesim.schedule import OpKind, Schedule, ScheduleOp

US_PER_S = 10**6


class SimulationError(Exception):
    pass


def to_us(seconds) -> int:
    """Seconds -> integer microseconds, rounding half up."""
    return math.floor(Fraction(seconds) * US_PER_S + Fraction(1, 2))


@dataclass(frozen=True)
class Event:
    stage: int
    op: ScheduleOp
    start: int
    end: int

    @property
    def dur(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class SimRun:
    p: int
    m: int
    events: Tuple[Event, ...]
    # per stage: (time_us, resident activation count) after each change
    mem_series: Tuple[Tuple[Tuple[int, int], ...], ...]
    total_time: int
    per_stage_idle: Tuple[int, ...]
    per_stage_busy: Tuple[int, ...]
    load_stall: Tuple[int, ...]
    flops_done: Fraction
    cost: StageCost
    layout: DeviceLayout

    @property
    def total_time_s(self) -> Fraction:
        return Fraction(self.total_time, US_PER_S)

    def stage_events(self, stage: int) -> List[Event]:
        return [e for e in self.events if e.stage == stage]

    def peak_count(self, stage: int) -> int:
        return max((c for _, c in self.mem_series[stage]), default=0)


@dataclass(frozen=True)
class MemoryTimeline:
    series: Tuple[Tuple[Tuple[int, int], ...], ...]  # (time_us, bytes) per stage
    peak_bytes: Tuple[int, ...]
    peak_counts: Tuple[int, ...]
    feasible: Optional[Tuple[bool, ...]] = None

    @property
    def all_feasible(self) -> bool:
        return self.feasible is None or all(self.feasible)


def _durations(schedule: Schedule, cost: StageCost, hw: HardwareProfile,
               layout: DeviceLayout) -> Dict[ScheduleOp, int]:
    t_f, t_b = to_us(cost.fwd_time), to_us(cost.bwd_time)
    if t_f < 0 or t_b < 0:
        raise SimulationError(f"negative pass time (t_f={t_f}us, t_b={t_b}us)")
    dur = {}
    for op in schedule.ops():
        if op.kind is OpKind.Forward:
            dur[op] = t_f
        elif op.kind is OpKind.Backward:
            dur[op] = t_b
        else:
            bw = hw.intra_node_bw if layout.co_located(op.stage, op.peer) else hw.inter_node_bw
            dur[op] = to_us(Fraction(cost.act_bytes_per_mb) / Fraction(bw))
    return dur


def simulate(schedule: Schedule, cost: StageCost, hw: HardwareProfile,
             layout: Optional[DeviceLayout] = None) -> SimRun:
    """Run ``schedule`` to completion and return its timeline."""
    if layout is None:
        layout = contiguous_layout(schedule.p, hw.gpus_per_node)
    if layout.p != schedule.p:
        raise SimulationError(f"layout has {layout.p} stages, schedule has {schedule.p}")
    dur = _durations(schedule, cost, hw, layout)
    preds = schedule.predecessors()
    succs: Dict[ScheduleOp, List[ScheduleOp]] = defaultdict(list)
    for a, b in sorted(schedule.deps):
        if a not in preds or b not in preds:
            missing = a if a not in preds else b
            raise SimulationError(f"dependency on op not in schedule: {missing}")
        succs[a].append(b)

    pending = {op: len(ps) for op, ps in preds.items()}
    ready_at = {op: 0 for op in preds}
    lane_free: Dict[Tuple[int, bool], int] = defaultdict(int)
    start: Dict[ScheduleOp, int] = {}
    end: Dict[ScheduleOp, int] = {}

    def key(op: ScheduleOp):
        return (ready_at[op], op.microbatch, op.kind, op.stage)

    heap = [(key(op), op) for op, n in pending.items() if n == 0]
    heapq.heapify(heap)
    while heap:
        (ready, *_), op = heapq.heappop(heap)
        lane = (op.stage, op.kind.is_compute)
        s = max(ready, lane_free[lane])
        start[op], end[op] = s, s + dur[op]
        lane_free[lane] = end[op]
        for nxt in succs[op]:
            ready_at[nxt] = max(ready_at[nxt], end[op])
            pending[nxt] -= 1
            if pending[nxt] == 0:
                heapq.heappush(heap, (key(nxt), nxt))

    if len(end) != len(preds):
        stuck = sorted(op for op in preds if op not in end)
        detail = "; ".join(f"{op} waits on {[str(d) for d in preds[op] if d not in end]}"
                           for op in stuck[:5])
        raise SimulationError(f"dependency cycle: {len(stuck)} ops never became ready: {detail}")

    events = tuple(sorted((Event(op.stage, op, start[op], end[op]) for op in preds),
                          key=lambda e: (e.start, e.stage, e.op.kind, e.op.microbatch)))
    total = max((e.end for e in events), default=0)

    p = schedule.p
    busy = [0] * p
    stall = [0] * p
    deltas: List[Dict[int, int]] = [defaultdict(int) for _ in range(p)]
    for op in preds:
        x = op.stage
        if op.kind is OpKind.Forward:
            busy[x] += dur[op]
            deltas[x][end[op]] += 1
        elif op.kind is OpKind.Backward:
            busy[x] += dur[op]
            deltas[x][end[op]] -= 1
            loads = [d for d in preds[op] if d.kind is OpKind.Load]
            if loads:
                others = max((end[d] for d in preds[op] if d.kind is not OpKind.Load), default=0)
                stall[x] += max(0, max(end[d] for d in loads) - others)
        elif op.kind is OpKind.Evict:
            deltas[x][start[op]] -= 1
            deltas[op.peer][start[op]] += 1
        else:
            deltas[x][end[op]] += 1
            deltas[op.peer][end[op]] -= 1

    series = []
    for x in range(p):
        level, steps = 0, []
        for t in sorted(deltas[x]):
            if deltas[x][t] == 0:
                continue
            level += deltas[x][t]
            if level < 0:
                raise SimulationError(f"stage {x}: negative resident count at t={t}us")
            steps.append((t, level))
        series.append(tuple(steps))

    return SimRun(
        p=p,
        m=schedule.m,
        events=events,
        mem_series=tuple(series),
        total_time=total,
        per_stage_idle=tuple(total - b for b in busy),
        per_stage_busy=tuple(busy),
        load_stall=tuple(stall),
        flops_done=schedule.m * p * Fraction(cost.model_flops),
        cost=cost,
        layout=layout,
    )


def memory_timeline(run: SimRun, cost: Optional[StageCost] = None,
                    hw: Optional[HardwareProfile] = None) -> MemoryTimeline:
    """Resident bytes per device: static bytes plus live activations."""
    cost = cost or run.cost
    act = Fraction(cost.act_bytes_per_mb)
    series, peaks, counts = [], [], []
    for x in range(run.p):
        base = Fraction(cost.static_bytes[x]) if x < len(cost.static_bytes) else Fraction(0)
        steps = [(0, math.ceil(base))]
        steps += [(t, math.ceil(base + c * act)) for t, c in run.mem_series[x]]
        series.append(tuple(steps))
        peaks.append(max(b for _, b in steps))
        counts.append(run.peak_count(x))
    feasible = None
    if hw is not None:
        feasible = tuple(pk <= hw.mem_per_device for pk in peaks)
    return MemoryTimeline(tuple(series), tuple(peaks), tuple(counts), feasible)


def bubble_time(run: SimRun) -> Tuple[int, ...]:
    """Idle microseconds on each stage's compute lane."""
    return run.per_stage_idle


def simulated_mfu(run: SimRun, model: ModelConfig, par: ParallelConfig, hw: HardwareProfile) -> Fraction:
    """Model FLOPs of the iteration over ``p * t`` devices running for ``total_time``."""
    if run.total_time == 0:
        raise SimulationError("zero-length run has no MFU")
    flops = run.m * model_flops(model, par.micro_batch).total
    capacity = run.p * par.tensor * Fraction(hw.peak_flops) * run.total_time_s
    return flops / capacity


def trace_events(run: SimRun, layout: Optional[DeviceLayout] = None) -> List[dict]:
    layout = layout or run.layout
    out = []
    for e in run.events:
        out.append({"name": e.op.label, "ph": "X", "ts": e.start, "dur": e.dur,
                    "pid": layout.node(e.stage), "tid": e.stage})
    mem = memory_timeline(run)
    for x, steps in enumerate(mem.series):
        for t, nbytes in steps:
            out.append({"name": "resident_bytes", "ph": "C", "pid": layout.node(x), "tid": x,
                        "ts": t, "args": {"bytes": int(nbytes)}})
    return out


def export_trace(run: SimRun, layout: Optional[DeviceLayout], path: Union[str, Path]) -> Path:
    """Write the run as a Chrome Trace Event Format JSON array."""
    path = Path(path)
    data = json.dumps(trace_events(run, layout), separators=(",", ":"))
    try:
        path.write_text(data + "\n")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write trace to {path}: {exc.strerror}") from exc
    return path


def export_memory(run: SimRun, path: Union[str, Path], cost: Optional[StageCost] = None) -> Path:
    """Write ``device time bytes`` lines, one per memory step."""
    path = Path(path)
    mem = memory_timeline(run, cost)
    lines = [f"{x} {t} {b}\n" for x, steps in enumerate(mem.series) for t, b in steps]
    try:
        path.write_text("".join(lines))
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write memory dump to {path}: {exc.strerror}") from exc
    return path
