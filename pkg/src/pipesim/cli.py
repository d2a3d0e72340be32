"""Command-line front end.

Exit codes: 0 success, 2 validation failure, 3 I/O or parse failure,
4 internal invariant violation. Memory infeasibility is reported as a
``FEASIBILITY: FAIL`` row and does not change the exit code.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

from pipesim.config import (
    ATTENTION_MODES,
    PRESETS,
    ConfigParseError,
    LayoutError,
    layout_for,
    load_config,
    load_preset,
    validate_config,
)
from pipesim.costmodel import DEFAULT_BYTES_PER_PARAM, stage_times
from pipesim.engine import (
    SimulationError,
    bubble_time,
    export_memory,
    export_trace,
    memory_timeline,
    simulate,
    simulated_mfu,
    to_us,
)
from pipesim.estimator import (
    EstimatorContext,
    StageMeasurement,
    mfu_model_from_stage,
    mfu_stage_from_sim,
    predict_vs_observed,
    read_measurements,
    speedup_ratio,
)
from pipesim.schedule import OpKind, ScheduleError, build_1f1b, build_bpipe

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_INTERNAL = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# Report


def fmt_frac(x) -> str:
    return f"{float(x):.3g}"


@dataclass
class Report:
    sections: List[Tuple[str, List[Tuple[str, str, str]]]] = field(default_factory=list)

    def section(self, title: str) -> List[Tuple[str, str, str]]:
        rows: List[Tuple[str, str, str]] = []
        self.sections.append((title, rows))
        return rows

    def render(self, fmt: str = "text") -> str:
        if fmt == "tsv":
            lines = ["section\tlabel\tvalue\tunit"]
            for title, rows in self.sections:
                lines += [f"{title}\t{lab}\t{val}\t{unit}" for lab, val, unit in rows]
            return "\n".join(lines) + "\n"
        width = max((len(lab) for _, rows in self.sections for lab, _, _ in rows), default=0)
        # free-text cells are left out of the column width
        vwidth = max((len(val) for _, rows in self.sections for _, val, _ in rows if len(val) <= 24),
                     default=0)
        out = []
        for title, rows in self.sections:
            out.append(f"== {title} ==")
            out += [f"  {lab:<{width}}  {val:>{vwidth}}  {unit}".rstrip() for lab, val, unit in rows]
        return "\n".join(out) + "\n"


# Config resolution


def _resolve(args) -> tuple:
    preset, path = getattr(args, "preset", None), getattr(args, "config", None)
    if preset and path:
        raise CliError("use either --preset or --config, not both", EXIT_INVALID)
    if path:
        model, par, hw = load_config(path)
    elif preset:
        model, par, hw = load_preset(preset)
    else:
        raise CliError("one of --preset or --config is required", EXIT_INVALID)

    par_over = {}
    for attr, key in (("micro_batch", "micro_batch"), ("global_batch", "global_batch"),
                      ("tensor", "tensor"), ("pipeline", "pipeline"), ("attention", "attention_mode")):
        val = getattr(args, attr, None)
        if val is not None:
            par_over[key] = val
    bpipe = getattr(args, "bpipe", None)
    if bpipe is not None:
        par_over["bpipe"] = bpipe == "on"
    hw_over = {k: getattr(args, k) for k in ("intra_node_bw", "inter_node_bw")
               if getattr(args, k, None) is not None}
    return model, dataclasses.replace(par, **par_over), dataclasses.replace(hw, **hw_over)


def _validated(args):
    model, par, hw = _resolve(args)
    result = validate_config(model, par, hw)
    if isinstance(result, list):
        raise CliError("\n".join(f"violation: {v}" for v in result), EXIT_INVALID)
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return result


def _config_rows(report: Report, model, par) -> None:
    rows = report.section("config")
    rows += [
        ("model", model.name, ""),
        ("hidden h", str(model.hidden), ""),
        ("heads a", str(model.num_heads), ""),
        ("layers l", str(model.layers), ""),
        ("seq_len s", str(model.seq_len), "tokens"),
        ("vocab v", str(model.vocab), "tokens"),
        ("ffn kind", model.ffn_kind, ""),
        ("tensor t", str(par.tensor), "devices"),
        ("pipeline p", str(par.pipeline), "stages"),
        ("micro-batch b", str(par.micro_batch), "samples"),
        ("global batch B", str(par.global_batch), "samples"),
        ("microbatches m", str(par.num_microbatches), ""),
        ("attention", par.attention_mode, ""),
        ("bpipe", "on" if par.bpipe else "off", ""),
    ]


# Commands


def cmd_validate(args) -> Report:
    vc = _validated(args)
    report = Report()
    _config_rows(report, vc.model, vc.parallel)
    report.section("validation").append(("status", "valid", ""))
    return report


def run_simulation(model, par, hw, bytes_per_param=DEFAULT_BYTES_PER_PARAM):
    cost = stage_times(model, par, hw, bytes_per_param=bytes_per_param)
    p, m = par.pipeline, par.num_microbatches
    sched = build_bpipe(p, m) if par.bpipe and p >= 2 else build_1f1b(p, m)
    layout = layout_for(par, hw)
    return cost, sched, layout, simulate(sched, cost, hw, layout)


def cmd_simulate(args) -> Report:
    vc = _validated(args)
    model, par, hw = vc.model, vc.parallel, vc.hardware
    cost, sched, layout, run = run_simulation(model, par, hw, args.bytes_per_param)
    report = Report()
    _config_rows(report, model, par)

    slot_us = to_us(cost.fwd_time) + to_us(cost.bwd_time)
    ideal = (run.m + run.p - 1) * slot_us
    rows = report.section("stage cost")
    rows += [
        ("forward time t_f", str(to_us(cost.fwd_time)), "us"),
        ("backward time t_b", str(to_us(cost.bwd_time)), "us"),
        ("slot time T(b)", str(slot_us), "us"),
        ("activation per microbatch", str(round(cost.act_bytes_per_mb)), "bytes"),
    ]
    if sched.bpipe_threshold is not None:
        rows.append(("bpipe activation limit", str(sched.bpipe_threshold), "activations"))

    idle = bubble_time(run)
    rows = report.section("timeline")
    rows += [
        ("total time", str(run.total_time), "us"),
        ("ideal (m+p-1)*T", str(ideal), "us"),
        ("overhead vs ideal", str(run.total_time - ideal), "us"),
        ("load stall total", str(sum(run.load_stall)), "us"),
        ("bubble fraction (stage 0)", fmt_frac(Fraction(idle[0], run.total_time)), "fraction"),
    ]
    for x in range(run.p):
        rows.append((f"stage {x} idle", str(idle[x]), "us"))
    for x in range(run.p):
        if run.load_stall[x]:
            rows.append((f"stage {x} load stall", str(run.load_stall[x]), "us"))
    evicts = [sum(1 for op in sched.transfer_ops(x) if op.kind is OpKind.Evict) for x in range(run.p)]
    for x in range(run.p):
        if evicts[x]:
            rows.append((f"stage {x} evictions", str(evicts[x]), "activations"))

    mem = memory_timeline(run, cost, hw)
    rows = report.section("memory")
    for x in range(run.p):
        rows.append((f"stage {x} peak activations", str(mem.peak_counts[x]), "activations"))
    for x in range(run.p):
        rows.append((f"stage {x} peak memory", str(mem.peak_bytes[x]), "bytes"))
    rows.append(("device capacity", str(int(hw.mem_per_device)), "bytes"))
    rows.append(("FEASIBILITY", "PASS" if mem.all_feasible else "FAIL", ""))

    mfu = simulated_mfu(run, model, par, hw)
    stage = mfu_stage_from_sim(None, cost, hw)
    pred = mfu_model_from_stage(stage, EstimatorContext(par.global_batch, par.pipeline))
    rows = report.section("mfu")
    rows += [
        ("simulated MFU", fmt_frac(mfu), "fraction"),
        ("single-stage MFU", fmt_frac(stage.mfu_stage), "fraction"),
        ("predicted MFU (no overhead)", fmt_frac(pred), "fraction"),
    ]

    if args.trace:
        export_trace(run, layout, args.trace)
    if args.mem_dump:
        export_memory(run, args.mem_dump, cost)
    return report


def _measurement(b, mfu, label) -> StageMeasurement:
    if b is None or mfu is None:
        raise CliError(f"--b-{label} and --mfu-stage-{label} are required", EXIT_INVALID)
    try:
        return StageMeasurement(b, mfu)
    except ValueError as exc:
        raise CliError(f"{label} measurement: {exc}", EXIT_INVALID) from None


def cmd_estimate(args) -> Report:
    try:
        ctx = EstimatorContext(args.B, args.p)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INVALID) from None
    if args.measurements:
        try:
            meas = read_measurements(args.measurements)
        except OSError as exc:
            raise CliError(f"{args.measurements}: {exc.strerror or exc}", EXIT_IO) from None
        except ValueError as exc:
            raise CliError(str(exc), EXIT_INVALID) from None
        if len(meas) < 1:
            raise CliError(f"{args.measurements}: no measurements", EXIT_INVALID)
        base, rest = meas[0], meas[1:]
    else:
        base = _measurement(args.b_from, args.mfu_stage_from, "from")
        rest = [_measurement(args.b_to, args.mfu_stage_to, "to")]

    report = Report()
    rows = report.section("inputs")
    rows += [("global batch B", str(ctx.B), "samples"), ("pipeline p", str(ctx.p), "stages")]
    rows = report.section("predicted model MFU")
    for meas in [base, *rest]:
        rows.append((f"b={meas.b} single-stage", fmt_frac(meas.mfu_stage), "fraction"))
        rows.append((f"b={meas.b} model", fmt_frac(mfu_model_from_stage(meas, ctx)), "fraction"))
    rows = report.section("speedup")
    for meas in rest:
        rows.append((f"b={base.b} -> b={meas.b} predicted", fmt_frac(speedup_ratio(meas, base, ctx)), "ratio"))

    if args.observed_from is not None or args.observed_to is not None:
        if args.observed_from is None or args.observed_to is None or len(rest) != 1:
            raise CliError("--observed-from and --observed-to go together with exactly one target",
                           EXIT_INVALID)
        try:
            cmp_ = predict_vs_observed(rest[0], base, args.observed_to, args.observed_from, ctx)
        except ValueError as exc:
            raise CliError(str(exc), EXIT_INVALID) from None
        rows = report.section("observed")
        rows += [
            ("observed ratio", fmt_frac(cmp_.observed), "ratio"),
            ("relative gap", fmt_frac(cmp_.gap), "fraction"),
            ("prediction exceeds observation", "yes" if cmp_.exceeds_observation else "no", ""),
            ("note", cmp_.note, ""),
        ]
        if cmp_.predicted > 1 > cmp_.observed:
            rows.append(("warning", "predicted gain but observed loss: overheads dominate", ""))
    return report


def _parse_b_list(text: str) -> List[int]:
    try:
        vals = sorted({int(tok) for tok in text.split(",") if tok.strip()})
    except ValueError:
        raise CliError(f"--b-list must be comma-separated integers, got {text!r}", EXIT_INVALID) from None
    if not vals or vals[0] < 1:
        raise CliError(f"--b-list needs positive integers, got {text!r}", EXIT_INVALID)
    return vals


def cmd_sweep(args) -> Report:
    model, par, hw = _resolve(args)
    report = Report()
    base_flops = None
    for b in _parse_b_list(args.b_list):
        rows = report.section(f"b={b}")
        par_b = dataclasses.replace(par, micro_batch=b, bpipe=False)
        result = validate_config(model, par_b, hw)
        if isinstance(result, list):
            bad = "; ".join(str(v) for v in result)
            rows.append(("warning", f"skipped: {bad}", ""))
            continue
        cost = stage_times(model, par_b, hw, bytes_per_param=args.bytes_per_param)
        m = par_b.num_microbatches
        single = simulate(build_1f1b(1, m), cost, hw)
        stage = mfu_stage_from_sim(single, cost, hw)
        pred = mfu_model_from_stage(stage, EstimatorContext(par_b.global_batch, par_b.pipeline))
        per_b = cost.flops_fwd / b
        base_flops = base_flops if base_flops is not None else per_b
        rows += [
            ("single-stage MFU", fmt_frac(stage.mfu_stage), "fraction"),
            ("predicted model MFU", fmt_frac(pred), "fraction"),
            ("stage forward FLOPs", str(round(cost.flops_fwd)), "FLOP"),
            ("FLOPs linear in b", "yes" if per_b == base_flops else "no", ""),
        ]
        for label, bp in (("1F1B", False), ("BPipe", True)):
            if bp and par_b.pipeline < 2:
                continue
            par_x = dataclasses.replace(par_b, bpipe=bp)
            *_, run = run_simulation(model, par_x, hw, args.bytes_per_param)
            mem = memory_timeline(run, cost, hw)
            rows.append((f"{label} peak memory", str(max(mem.peak_bytes)), "bytes"))
            rows.append((f"{label} FEASIBILITY", "PASS" if mem.all_feasible else "FAIL", ""))
    return report


# Parser


def _common(defaults: bool) -> argparse.ArgumentParser:
    sup = None if defaults else argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_argument_group("input")
    src.add_argument("--preset", choices=PRESETS, default=sup, help="bundled model preset")
    src.add_argument("--config", default=sup, metavar="PATH", help="YAML config file")
    src.add_argument("--format", choices=("text", "tsv"), default="text" if defaults else sup)
    return common


def _overrides(p: argparse.ArgumentParser, bpipe: bool = True) -> None:
    g = p.add_argument_group("overrides")
    g.add_argument("--micro-batch", "-b", type=int, dest="micro_batch")
    g.add_argument("--global-batch", type=int, dest="global_batch")
    g.add_argument("--tensor", type=int)
    g.add_argument("--pipeline", type=int)
    g.add_argument("--attention", choices=ATTENTION_MODES)
    g.add_argument("--intra-node-bw", type=float, dest="intra_node_bw", metavar="BYTES_PER_S")
    g.add_argument("--inter-node-bw", type=float, dest="inter_node_bw", metavar="BYTES_PER_S")
    if bpipe:
        g.add_argument("--bpipe", choices=("on", "off"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pipesim", parents=[_common(True)],
        description="Simulate 1F1B/BPipe pipeline schedules and estimate MFU.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", parents=[_common(False)], help="check a configuration")
    _overrides(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("simulate", parents=[_common(False)], help="simulate one training iteration")
    _overrides(p)
    p.add_argument("--trace", metavar="PATH", help="write a Chrome trace JSON file")
    p.add_argument("--mem-dump", metavar="PATH", dest="mem_dump", help="write 'device time bytes' lines")
    p.add_argument("--bytes-per-param", type=float, default=DEFAULT_BYTES_PER_PARAM, dest="bytes_per_param")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", parents=[_common(False)],
                       help="predict model MFU and speedup from single-stage MFU")
    p.add_argument("--b-from", type=int, dest="b_from")
    p.add_argument("--mfu-stage-from", type=float, dest="mfu_stage_from")
    p.add_argument("--b-to", type=int, dest="b_to")
    p.add_argument("--mfu-stage-to", type=float, dest="mfu_stage_to")
    p.add_argument("--measurements", metavar="PATH",
                   help="two-column 'b mfu_stage' file; speedups are relative to the first row")
    p.add_argument("--B", type=int, required=True, help="global batch size")
    p.add_argument("--p", type=int, required=True, help="pipeline stages")
    p.add_argument("--observed-from", type=float, dest="observed_from", help="observed model MFU at b-from")
    p.add_argument("--observed-to", type=float, dest="observed_to", help="observed model MFU at b-to")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("sweep", parents=[_common(False)], help="sweep micro-batch sizes")
    _overrides(p, bpipe=False)
    p.add_argument("--b-list", required=True, dest="b_list", help="comma-separated micro-batch sizes")
    p.add_argument("--bytes-per-param", type=float, default=DEFAULT_BYTES_PER_PARAM, dest="bytes_per_param")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        report = args.func(args)
    except CliError as exc:
        print(f"error: {exc}" if exc.code != EXIT_INVALID else str(exc), file=sys.stderr)
        return exc.code
    except ConfigParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except LayoutError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SimulationError, ScheduleError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    sys.stdout.write(report.render(args.format))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
