"""Whole-model MFU and micro-batch speedup from single-stage measurements.

With ``B/b`` microbatches and ``p`` homogeneous stages an iteration lasts
``(B/b + p - 1) * T(b)``, so the model reaches

    MFU(b) = MFU_stage(b) * B / (B + b (p - 1))

and the ratio between two micro-batch sizes ``x`` and ``y`` is

    MFU(x) / MFU(y) = (B + y (p-1)) / (B + x (p-1)) * MFU_stage(x) / MFU_stage(y).

Pipeline communication and activation-transfer overheads are ignored, which
makes the ratio an upper bound on the speedup actually observed.

Functions accept floats or exact ``Fraction`` values and keep the type.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import List, Optional, Union

from pipesim.config import HardwareProfile
from pipesim.costmodel import StageCost
from pipesim.engine import SimRun

Number = Union[float, Fraction]


@dataclass(frozen=True)
class StageMeasurement:
    b: int
    mfu_stage: Number
    source: str = "measured"

    def __post_init__(self):
        # simulated values carry microsecond rounding and may sit a hair above 1
        upper_ok = self.mfu_stage <= 1 or self.source == "simulated"
        if not (0 < self.mfu_stage and upper_ok):
            raise ValueError(f"mfu_stage must lie in (0, 1], got {self.mfu_stage}")
        if self.b < 1:
            raise ValueError(f"micro-batch size must be >= 1, got {self.b}")
        if self.source not in ("measured", "simulated"):
            raise ValueError(f"source must be 'measured' or 'simulated', got {self.source!r}")


@dataclass(frozen=True)
class EstimatorContext:
    B: int
    p: int
    F_over_Fstage: Optional[Number] = None
    P: Optional[float] = None

    def __post_init__(self):
        if self.B < 1 or self.p < 1:
            raise ValueError(f"need B >= 1 and p >= 1 (B={self.B}, p={self.p})")

    @property
    def stage_ratio(self) -> Number:
        # heterogeneous stages are not modelled; F = p * F_stage
        return self.p if self.F_over_Fstage is None else self.F_over_Fstage


def bubble_factor(b: int, ctx: EstimatorContext) -> Fraction:
    return Fraction(ctx.B, ctx.B + b * (ctx.p - 1))


def mfu_model_from_stage(meas: StageMeasurement, ctx: EstimatorContext) -> Number:
    return meas.mfu_stage * bubble_factor(meas.b, ctx)


def speedup_ratio(x: StageMeasurement, y: StageMeasurement, ctx: EstimatorContext) -> Number:
    """Predicted MFU(x) / MFU(y) for micro-batch sizes ``x.b`` and ``y.b``."""
    if x == y:
        return type(x.mfu_stage)(1)
    return Fraction(ctx.B + y.b * (ctx.p - 1), ctx.B + x.b * (ctx.p - 1)) * x.mfu_stage / y.mfu_stage


def mfu_stage_from_sim(run: Optional[SimRun], cost: StageCost, hw: HardwareProfile) -> StageMeasurement:
    """Single-stage MFU: stage model FLOPs per device over ``P * T(b)``.

    ``run`` must be a one-stage simulation; its per-microbatch slot time is
    used. Pass ``None`` to take ``T(b)`` straight from the cost model.
    """
    if run is None:
        slot = Fraction(cost.slot_time)
    else:
        if run.p != 1:
            raise ValueError(f"expected a single-stage run, got p={run.p}")
        slot = run.total_time_s / run.m
    per_device = Fraction(cost.model_flops) / cost.tensor
    mfu = per_device / (Fraction(hw.peak_flops) * slot)
    return StageMeasurement(cost.micro_batch, mfu, "simulated")


@dataclass(frozen=True)
class Comparison:
    predicted: float
    observed: float
    gap: float  # (predicted - observed) / observed
    note: str

    @property
    def exceeds_observation(self) -> bool:
        return self.predicted > self.observed


UPPER_BOUND_NOTE = ("prediction ignores pipeline communication and BPipe transfer overhead; "
                    "it is an approximate upper bound of the speedup")


def predict_vs_observed(x: StageMeasurement, y: StageMeasurement, observed_x: float,
                        observed_y: float, ctx: EstimatorContext) -> Comparison:
    """Compare the predicted speedup x over y with the observed whole-model MFU ratio."""
    for name, val in (("observed_x", observed_x), ("observed_y", observed_y)):
        if not 0 < val <= 1:
            raise ValueError(f"{name} must lie in (0, 1], got {val}")
    predicted = float(speedup_ratio(x, y, ctx))
    observed = observed_x / observed_y
    return Comparison(predicted, observed, (predicted - observed) / observed, UPPER_BOUND_NOTE)


def read_measurements(path: Union[str, Path]) -> List[StageMeasurement]:
    """Parse a two-column ``b mfu_stage`` file; ``#`` starts a comment."""
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'b mfu_stage', got {line!r}")
        try:
            out.append(StageMeasurement(int(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out
