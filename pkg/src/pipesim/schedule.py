"""1F1B and BPipe pipeline schedules.

A schedule is a list of operations per stage. Forward/Backward run on the
stage's compute lane; Evict/Load run on its transfer lane and carry the peer
stage that hosts the activation. Dependencies are derived from the lists:

* program order on each lane,
* ``F(s, i) -> F(s+1, i)`` and ``B(s+1, i) -> B(s, i)``,
* a transfer op waits for the compute op listed just before it,
* ``Evict(s, i) -> Load(s, i) -> B(s, i)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple


class ScheduleError(Exception):
    """Malformed schedule (e.g. a Backward whose activation is not resident)."""


class OpKind(enum.IntEnum):
    # value order is the simulator's tie-break order
    Forward = 0
    Backward = 1
    Evict = 2
    Load = 3

    @property
    def is_compute(self) -> bool:
        return self <= OpKind.Backward


@dataclass(frozen=True, order=True)
class ScheduleOp:
    stage: int
    kind: OpKind
    microbatch: int
    peer: Optional[int] = None

    def __str__(self) -> str:
        s = f"{self.stage} {self.kind.name} {self.microbatch}"
        return s if self.peer is None else f"{s} {self.peer}"

    @property
    def label(self) -> str:
        return {OpKind.Forward: "F", OpKind.Backward: "B",
                OpKind.Evict: "evict", OpKind.Load: "load"}[self.kind] + str(self.microbatch)


Dep = Tuple[ScheduleOp, ScheduleOp]


@dataclass(frozen=True)
class Schedule:
    p: int
    m: int
    per_stage_ops: Tuple[Tuple[ScheduleOp, ...], ...]
    deps: FrozenSet[Dep]
    bpipe_threshold: Optional[int] = None

    def ops(self) -> Iterable[ScheduleOp]:
        for stage_ops in self.per_stage_ops:
            yield from stage_ops

    def compute_ops(self, stage: int) -> List[ScheduleOp]:
        return [op for op in self.per_stage_ops[stage] if op.kind.is_compute]

    def transfer_ops(self, stage: int) -> List[ScheduleOp]:
        return [op for op in self.per_stage_ops[stage] if not op.kind.is_compute]

    def dump(self) -> str:
        """One op per line: ``stage kind microbatch [peer]``."""
        return "".join(f"{op}\n" for op in self.ops())

    def predecessors(self) -> Dict[ScheduleOp, List[ScheduleOp]]:
        preds: Dict[ScheduleOp, List[ScheduleOp]] = {op: [] for op in self.ops()}
        for a, b in sorted(self.deps):
            preds[b].append(a)
        return preds


def bpipe_threshold(p: int) -> int:
    """Maximum resident activations per device under BPipe: ceil((p + 2) / 2)."""
    return -(-(p + 2) // 2)


def derive_deps(p: int, per_stage_ops: Sequence[Sequence[ScheduleOp]]) -> FrozenSet[Dep]:
    deps: Set[Dep] = set()
    for stage, ops in enumerate(per_stage_ops):
        last_compute = last_transfer = None
        for op in ops:
            if op.kind.is_compute:
                if last_compute is not None:
                    deps.add((last_compute, op))
                last_compute = op
                i = op.microbatch
                if op.kind is OpKind.Forward and stage + 1 < p:
                    deps.add((op, ScheduleOp(stage + 1, OpKind.Forward, i)))
                elif op.kind is OpKind.Backward:
                    if stage > 0:
                        deps.add((op, ScheduleOp(stage - 1, OpKind.Backward, i)))
                    if stage == p - 1:
                        deps.add((ScheduleOp(stage, OpKind.Forward, i), op))
            else:
                if last_transfer is not None:
                    deps.add((last_transfer, op))
                last_transfer = op
                if last_compute is not None:
                    deps.add((last_compute, op))
                if op.kind is OpKind.Load:
                    deps.add((ScheduleOp(stage, OpKind.Evict, op.microbatch, op.peer), op))
                    deps.add((op, ScheduleOp(stage, OpKind.Backward, op.microbatch)))
    return frozenset(deps)


def _stage_1f1b(stage: int, p: int, m: int) -> List[ScheduleOp]:
    warmup = min(p - 1 - stage, m)
    ops = [ScheduleOp(stage, OpKind.Forward, i) for i in range(warmup)]
    fwd, bwd = warmup, 0
    while fwd < m:
        ops.append(ScheduleOp(stage, OpKind.Forward, fwd))
        ops.append(ScheduleOp(stage, OpKind.Backward, bwd))
        fwd += 1
        bwd += 1
    ops.extend(ScheduleOp(stage, OpKind.Backward, i) for i in range(bwd, m))
    return ops


def build_1f1b(p: int, m: int) -> Schedule:
    """One-forward-one-backward schedule: stage ``x`` warms up with ``min(p-1-x, m)`` forwards."""
    if p < 1 or m < 1:
        raise ValueError(f"need p >= 1 and m >= 1 (p={p}, m={m})")
    per_stage = tuple(tuple(_stage_1f1b(x, p, m)) for x in range(p))
    return Schedule(p, m, per_stage, derive_deps(p, per_stage))


def _insert_transfers(compute: List[ScheduleOp], peer: int, limit: int) -> List[ScheduleOp]:
    stage = compute[0].stage
    out: List[ScheduleOp] = []
    resident = 0
    away: Set[int] = set()
    for op in compute:
        out.append(op)
        i = op.microbatch
        if op.kind is OpKind.Forward:
            resident += 1
            if resident > limit:
                # the newest activation has the most distant backward
                out.append(ScheduleOp(stage, OpKind.Evict, i, peer))
                away.add(i)
                resident -= 1
        else:
            resident -= 1
            # prefetch the next backward's activation into the slot just freed
            if i + 1 in away:
                out.append(ScheduleOp(stage, OpKind.Load, i + 1, peer))
                away.discard(i + 1)
                resident += 1
    if away:
        raise ScheduleError(f"stage {stage}: activations {sorted(away)} never loaded back")
    return out


def build_bpipe(p: int, m: int) -> Schedule:
    """1F1B compute order plus activation eviction to the paired stage ``p-1-x``.

    An evictor ``x < p // 2`` sends away the activation it just produced
    whenever keeping it would exceed ``ceil((p+2)/2)`` resident activations,
    and loads activation ``i`` back as soon as ``Backward(i-1)`` finishes.
    """
    if p < 2:
        raise ValueError(f"BPipe needs at least 2 stages (p={p})")
    if m < 1:
        raise ValueError(f"need m >= 1 (m={m})")
    limit = bpipe_threshold(p)
    per_stage = []
    for x in range(p):
        ops = _stage_1f1b(x, p, m)
        if x < p // 2:
            ops = _insert_transfers(ops, p - 1 - x, limit)
        per_stage.append(tuple(ops))
    per_stage = tuple(per_stage)
    return Schedule(p, m, per_stage, derive_deps(p, per_stage), bpipe_threshold=limit)


def parse_dump(text: str, bpipe_threshold: Optional[int] = None) -> Schedule:
    """Rebuild a :class:`Schedule` from :meth:`Schedule.dump` output."""
    ops: List[ScheduleOp] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) not in (3, 4):
                raise ValueError("expected 'stage kind microbatch [peer]'")
            peer = int(parts[3]) if len(parts) == 4 else None
            ops.append(ScheduleOp(int(parts[0]), OpKind[parts[1]], int(parts[2]), peer))
        except (ValueError, KeyError) as exc:
            raise ScheduleError(f"line {lineno}: {line!r}: {exc}") from None
    if not ops:
        raise ScheduleError("empty schedule dump")
    p = max(op.stage for op in ops) + 1
    m = max(op.microbatch for op in ops) + 1
    per_stage = tuple(tuple(op for op in ops if op.stage == x) for x in range(p))
    return Schedule(p, m, per_stage, derive_deps(p, per_stage), bpipe_threshold)


def _replay(schedule: Schedule, stage: int) -> Tuple[int, int]:
    """Return (peak own resident, peak evicted-away) for one stage's op list."""
    ops = schedule.per_stage_ops[stage]
    live: Set[int] = set()
    away: Set[int] = set()
    peak = peak_away = 0
    for n, op in enumerate(ops):
        i = op.microbatch
        if op.kind is OpKind.Forward:
            if i in live or i in away:
                raise ScheduleError(f"stage {stage}: Forward {i} issued twice")
            live.add(i)
            nxt = ops[n + 1] if n + 1 < len(ops) else None
            if nxt is not None and nxt.kind is OpKind.Evict and nxt.microbatch == i:
                # streamed out as it is produced; never counted as resident here
                continue
        elif op.kind is OpKind.Backward:
            if i not in live:
                where = "evicted and not loaded" if i in away else "never produced"
                raise ScheduleError(f"stage {stage}: Backward {i} but activation is {where}")
            live.remove(i)
        elif op.kind is OpKind.Evict:
            if i not in live:
                raise ScheduleError(f"stage {stage}: Evict {i} of a non-resident activation")
            live.remove(i)
            away.add(i)
        else:
            if i not in away:
                raise ScheduleError(f"stage {stage}: Load {i} of an activation that is not away")
            away.remove(i)
            live.add(i)
        peak = max(peak, len(live))
        peak_away = max(peak_away, len(away))
    return peak, peak_away


def peak_resident(schedule: Schedule, stage: int) -> int:
    """Peak activation count held by ``stage`` when replaying its op list.

    Acceptor stages also count activations hosted for their evictor, taking
    the evictor's peak away-count on top of their own peak (an upper bound).
    """
    own, _ = _replay(schedule, stage)
    hosted = 0
    for x in range(schedule.p):
        if x != stage and any(op.peer == stage for op in schedule.transfer_ops(x)):
            hosted += _replay(schedule, x)[1]
    return own + hosted
