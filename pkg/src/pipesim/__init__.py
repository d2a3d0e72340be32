"""Pipeline-parallel training simulator with 1F1B and BPipe schedules.

The package is split into a few layers:

- ``config``: model/parallel/hardware descriptions, presets, device layouts
- ``costmodel``: analytic FLOPs, activation and parameter bytes, pass times
- ``schedule``: per-stage operation lists for 1F1B and BPipe
- ``engine``: discrete-event simulation, memory series, trace export
- ``estimator``: whole-model MFU and micro-batch speedup predictions
- ``cli``: command-line front end
"""

from pipesim.config import (
    DeviceLayout,
    HardwareProfile,
    ModelConfig,
    ParallelConfig,
    ValidatedConfig,
    Violation,
    load_config,
    load_preset,
    pair_adjacent_layout,
    validate_config,
)
from pipesim.costmodel import (
    FlopsBreakdown,
    StageCost,
    activation_bytes,
    ffn_flops,
    model_flops,
    stage_times,
    static_bytes,
)
from pipesim.engine import (
    SimRun,
    bubble_time,
    export_trace,
    memory_timeline,
    simulate,
    simulated_mfu,
)
from pipesim.estimator import (
    EstimatorContext,
    StageMeasurement,
    mfu_model_from_stage,
    mfu_stage_from_sim,
    predict_vs_observed,
    speedup_ratio,
)
from pipesim.schedule import Schedule, ScheduleOp, build_1f1b, build_bpipe, peak_resident

__version__ = "0.1.0"

__all__ = [
    "DeviceLayout",
    "EstimatorContext",
    "FlopsBreakdown",
    "HardwareProfile",
    "ModelConfig",
    "ParallelConfig",
    "Schedule",
    "ScheduleOp",
    "SimRun",
    "StageCost",
    "StageMeasurement",
    "ValidatedConfig",
    "Violation",
    "activation_bytes",
    "bubble_time",
    "build_1f1b",
    "build_bpipe",
    "export_trace",
    "ffn_flops",
    "load_config",
    "load_preset",
    "memory_timeline",
    "mfu_model_from_stage",
    "mfu_stage_from_sim",
    "model_flops",
    "pair_adjacent_layout",
    "peak_resident",
    "predict_vs_observed",
    "simulate",
    "simulated_mfu",
    "speedup_ratio",
    "stage_times",
    "static_bytes",
    "validate_config",
]
