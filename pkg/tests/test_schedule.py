import pytest

from pipesim.schedule import (
    OpKind,
    ScheduleError,
    ScheduleOp,
    bpipe_threshold,
    build_1f1b,
    build_bpipe,
    parse_dump,
    peak_resident,
)


def live_counts(dump_lines, stage):
    """Independent replay from the text dump: own live count after each line,
    with an eviction that directly follows its forward applied together."""
    lines = [ln.split() for ln in dump_lines if int(ln.split()[0]) == stage]
    count, away, peak, peak_away = 0, 0, 0, 0
    for n, parts in enumerate(lines):
        kind = parts[1]
        count += {"Forward": 1, "Backward": -1, "Evict": -1, "Load": 1}[kind]
        away += {"Evict": 1, "Load": -1}.get(kind, 0)
        nxt = lines[n + 1] if n + 1 < len(lines) else None
        if kind == "Forward" and nxt and nxt[1] == "Evict" and nxt[2] == parts[2]:
            continue
        peak = max(peak, count)
        peak_away = max(peak_away, away)
    return peak, peak_away


def names(ops):
    return " ".join(op.label for op in ops)


def test_single_stage_order():
    s = build_1f1b(1, 4)
    assert names(s.per_stage_ops[0]) == "F0 B0 F1 B1 F2 B2 F3 B3"


def test_1f1b_stage0_prefix():
    s = build_1f1b(4, 8)
    assert names(s.per_stage_ops[0]).startswith("F0 F1 F2 F3 B0 F4 B1")
    assert peak_resident(s, 0) == 4


def test_1f1b_last_stage_alternates():
    s = build_1f1b(4, 3)
    assert names(s.per_stage_ops[3]) == "F0 B0 F1 B1 F2 B2"


@pytest.mark.parametrize("p", [1, 2, 4, 8, 16])
@pytest.mark.parametrize("mult", [1, 2, 16])
def test_1f1b_peaks_match_oracle(p, mult):
    m = mult * p
    s = build_1f1b(p, m)
    lines = s.dump().splitlines()
    for x in range(p):
        assert peak_resident(s, x) == live_counts(lines, x)[0] == min(p - x, m)


@pytest.mark.parametrize("p,m", [(4, 2), (8, 3), (16, 5)])
def test_1f1b_few_microbatches(p, m):
    s = build_1f1b(p, m)
    for x in range(p):
        assert peak_resident(s, x) == min(p - x, m)


@pytest.mark.parametrize("p,m", [(4, 8), (8, 16), (5, 7)])
def test_1f1b_order_invariants(p, m):
    s = build_1f1b(p, m)
    for x in range(p):
        fs = [op.microbatch for op in s.per_stage_ops[x] if op.kind is OpKind.Forward]
        bs = [op.microbatch for op in s.per_stage_ops[x] if op.kind is OpKind.Backward]
        assert fs == bs == list(range(m))
        pos = {op: i for i, op in enumerate(s.per_stage_ops[x])}
        for i in range(m):
            assert pos[ScheduleOp(x, OpKind.Forward, i)] < pos[ScheduleOp(x, OpKind.Backward, i)]
    for i in range(m):
        for x in range(p - 1):
            assert (ScheduleOp(x, OpKind.Forward, i), ScheduleOp(x + 1, OpKind.Forward, i)) in s.deps
            assert (ScheduleOp(x + 1, OpKind.Backward, i), ScheduleOp(x, OpKind.Backward, i)) in s.deps


def test_threshold():
    assert [bpipe_threshold(p) for p in (2, 4, 5, 8, 16)] == [2, 3, 4, 5, 9]


def test_bpipe_p8_warmup_evictions():
    s = build_bpipe(8, 16)
    assert s.bpipe_threshold == 5
    for x in range(8):
        ops = s.per_stage_ops[x]
        first_b = next(i for i, op in enumerate(ops) if op.kind is OpKind.Backward)
        warm = sum(1 for op in ops[:first_b] if op.kind is OpKind.Evict)
        assert warm == max(0, (8 - x) - 5)
        assert all(op.peer == 7 - x for op in ops if op.kind in (OpKind.Evict, OpKind.Load))


def test_bpipe_p4_m4_single_eviction():
    s = build_bpipe(4, 4)
    evicts = [sum(1 for op in s.transfer_ops(x) if op.kind is OpKind.Evict) for x in range(4)]
    assert evicts == [1, 0, 0, 0]
    assert names(s.per_stage_ops[0]) == "F0 F1 F2 F3 evict3 B0 B1 B2 load3 B3"


def test_bpipe_p2_is_1f1b():
    assert build_bpipe(2, 6).per_stage_ops == build_1f1b(2, 6).per_stage_ops


def test_bpipe_rejects_p1():
    with pytest.raises(ValueError):
        build_bpipe(1, 4)


@pytest.mark.parametrize("p", [4, 8, 16])
@pytest.mark.parametrize("mult", [1, 4])
def test_bpipe_bound_with_oracle(p, mult):
    m = mult * p
    s = build_bpipe(p, m)
    k = bpipe_threshold(p)
    lines = s.dump().splitlines()
    for x in range(p):
        own, _ = live_counts(lines, x)
        hosted = live_counts(lines, p - 1 - x)[1] if x >= p // 2 else 0
        assert own + hosted == peak_resident(s, x) <= k


@pytest.mark.parametrize("p", [5, 7, 9])
def test_bpipe_odd_p(p):
    s = build_bpipe(p, 3 * p)
    mid = p // 2
    assert s.transfer_ops(mid) == []
    assert max(peak_resident(s, x) for x in range(p)) <= bpipe_threshold(p)


@pytest.mark.parametrize("p,m", [(4, 4), (8, 16), (16, 64), (6, 20)])
def test_bpipe_same_compute_order(p, m):
    a, b = build_1f1b(p, m), build_bpipe(p, m)
    for x in range(p):
        assert a.compute_ops(x) == b.compute_ops(x)


@pytest.mark.parametrize("p,m", [(4, 16), (8, 32)])
def test_every_load_precedes_its_backward(p, m):
    s = build_bpipe(p, m)
    loads = [op for op in s.ops() if op.kind is OpKind.Load]
    assert loads
    for op in loads:
        assert (op, ScheduleOp(op.stage, OpKind.Backward, op.microbatch)) in s.deps
        assert (ScheduleOp(op.stage, OpKind.Backward, op.microbatch - 1), op) in s.deps


def test_dump_roundtrip():
    s = build_bpipe(8, 16)
    again = parse_dump(s.dump(), s.bpipe_threshold)
    assert again == s


def test_dump_golden():
    assert build_bpipe(4, 4).dump().splitlines()[:6] == [
        "0 Forward 0", "0 Forward 1", "0 Forward 2", "0 Forward 3", "0 Evict 3 3", "0 Backward 0"]


def test_parse_dump_errors():
    with pytest.raises(ScheduleError, match="line 1"):
        parse_dump("0 Sideways 0\n")
    with pytest.raises(ScheduleError, match="empty"):
        parse_dump("\n")


def test_malformed_backward_detected():
    s = parse_dump("0 Backward 0\n0 Forward 0\n")
    with pytest.raises(ScheduleError, match="never produced"):
        peak_resident(s, 0)


def test_backward_of_evicted_detected():
    s = parse_dump("0 Forward 0\n0 Evict 0 1\n0 Backward 0\n1 Forward 0\n1 Backward 0\n")
    with pytest.raises(ScheduleError, match="evicted"):
        peak_resident(s, 0)
