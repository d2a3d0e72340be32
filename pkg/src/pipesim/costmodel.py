"""Analytic FLOPs, memory and pass-time model for one pipeline stage.

All quantities are exact rationals (:class:`fractions.Fraction`) so that
linearity and closed-form identities hold with ``==`` rather than a tolerance.
Call ``float()`` on a result for display.

Only matrix multiplications are counted. Per layer and microbatch the forward
pass costs ``24 b s h^2`` (QKV, output projection, FFN) plus ``4 b s^2 h``
(scores and context); backward costs twice the forward.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional, Tuple

from pipesim.config import HardwareProfile, ModelConfig, ParallelConfig

BACKWARD_FACTOR = 2
DEFAULT_BYTES_PER_PARAM = 18

ActivationCoeff = Callable[[ModelConfig, str], Fraction]


@dataclass(frozen=True)
class FlopsBreakdown:
    """Model FLOPs of one microbatch, forward plus backward, no recomputation."""

    attention_term: Fraction
    ffn_term: Fraction
    vocab_term: Fraction

    @property
    def total(self) -> Fraction:
        return self.attention_term + self.ffn_term + self.vocab_term

    total_per_microbatch = total


@dataclass(frozen=True)
class StageCost:
    """Per-microbatch cost of one (homogeneous) pipeline stage on one device.

    ``flops_fwd``/``flops_bwd`` are the hardware FLOPs executed by the whole
    stage (all tensor ranks); ``flops_bwd`` includes attention recomputation.
    ``model_flops`` is the stage's even share of the model FLOPs, which is
    what MFU counts. ``static_bytes`` holds one entry per stage.
    """

    fwd_time: Fraction
    bwd_time: Fraction
    flops_fwd: Fraction
    flops_bwd: Fraction
    model_flops: Fraction
    act_bytes_per_mb: Fraction
    static_bytes: Tuple[Fraction, ...]
    tensor: int = 1
    micro_batch: int = 1

    @property
    def slot_time(self) -> Fraction:
        return self.fwd_time + self.bwd_time

    def replace_times(self, fwd_time, bwd_time) -> "StageCost":
        from dataclasses import replace

        return replace(self, fwd_time=Fraction(fwd_time), bwd_time=Fraction(bwd_time))


def ffn_flops(model: ModelConfig, b: int) -> Fraction:
    """Forward FLOPs of one FFN block for one microbatch (16 b s h^2 for both kinds)."""
    s, h = model.seq_len, model.hidden
    if model.ffn_kind == "llama":
        inner = Fraction(8 * h, 3)
        # gate, up: h -> 8h/3; down: 8h/3 -> h
        return sum((2 * b * s * h * inner for _ in range(3)), Fraction(0))
    return Fraction(2 * 2 * b * s * h * (4 * h))


def attention_forward_flops(model: ModelConfig, b: int) -> Fraction:
    """Scores and context matmuls of one layer: the part recomputed in backward."""
    s, h = model.seq_len, model.hidden
    return Fraction(2 * b * s * s * h + 2 * b * s * s * h)


def _attention_block_flops(model: ModelConfig, b: int) -> Fraction:
    s, h = model.seq_len, model.hidden
    qkv = 3 * 2 * b * s * h * h
    proj = 2 * b * s * h * h
    return Fraction(qkv + proj) + attention_forward_flops(model, b)


def model_flops(model: ModelConfig, b: int) -> FlopsBreakdown:
    """Forward+backward model FLOPs of one microbatch of size ``b``.

    Sums to ``72 b s l h^2 (1 + s/(6h) + v/(16 l h))``. The FFN kind does not
    change the result.
    """
    passes = 1 + BACKWARD_FACTOR
    l = model.layers
    s, h, v = model.seq_len, model.hidden, model.vocab
    return FlopsBreakdown(
        attention_term=passes * l * _attention_block_flops(model, b),
        ffn_term=passes * l * ffn_flops(model, b),
        # logits: 2 b s h v per pass, with the weight the closed form assigns it
        vocab_term=Fraction(9 * b * s * h * v, 2),
    )


def activation_coeff(model: ModelConfig, mode: str) -> Fraction:
    """Bytes per (s*b*h) element of one layer's stored activations, with sequence parallelism."""
    if mode == "none":
        return 34 + Fraction(5 * model.num_heads * model.seq_len, model.hidden)
    return Fraction(34)


def activation_bytes(model: ModelConfig, par: ParallelConfig,
                     coeff: Optional[ActivationCoeff] = None) -> Fraction:
    """Resident activation bytes for one microbatch on one stage (per device)."""
    c = (coeff or activation_coeff)(model, par.attention_mode)
    layers = Fraction(model.layers, par.pipeline)
    return layers * model.seq_len * par.micro_batch * model.hidden * Fraction(c) / par.tensor


def stage_param_count(model: ModelConfig, par: ParallelConfig, stage: int) -> Fraction:
    """Parameters held by ``stage`` summed over its tensor ranks (matmul weights only)."""
    h = model.hidden
    count = Fraction(12 * h * h * model.layers, par.pipeline)
    # word embedding on the first stage, output projection on the last
    if stage == 0 or stage == par.pipeline - 1:
        count += h * model.vocab
    return count


def static_bytes(model: ModelConfig, par: ParallelConfig, stage: int = 0,
                 bytes_per_param: float = DEFAULT_BYTES_PER_PARAM) -> Fraction:
    """Parameter, gradient and optimizer-state bytes on one device of ``stage``."""
    return stage_param_count(model, par, stage) / par.tensor * Fraction(bytes_per_param)


def stage_forward_flops(model: ModelConfig, par: ParallelConfig) -> Fraction:
    """Forward FLOPs of one stage for one microbatch, summed over tensor ranks.

    Stages are homogeneous, so each takes ``1/p`` of the model FLOPs, logits
    included.
    """
    return model_flops(model, par.micro_batch).total / (1 + BACKWARD_FACTOR) / par.pipeline


def stage_times(model: ModelConfig, par: ParallelConfig, hw: HardwareProfile,
                coeff: Optional[ActivationCoeff] = None,
                bytes_per_param: float = DEFAULT_BYTES_PER_PARAM) -> StageCost:
    mode = par.attention_mode
    fwd = stage_forward_flops(model, par)
    bwd = BACKWARD_FACTOR * fwd
    if mode == "recompute":
        layers = Fraction(model.layers, par.pipeline)
        bwd += layers * attention_forward_flops(model, par.micro_batch)
    peak = Fraction(hw.peak_flops)
    t = par.tensor
    return StageCost(
        fwd_time=fwd / t / (peak * Fraction(hw.eff("forward", mode))),
        bwd_time=bwd / t / (peak * Fraction(hw.eff("backward", mode))),
        flops_fwd=fwd,
        flops_bwd=bwd,
        model_flops=(1 + BACKWARD_FACTOR) * fwd,
        act_bytes_per_mb=activation_bytes(model, par, coeff),
        static_bytes=tuple(static_bytes(model, par, x, bytes_per_param) for x in range(par.pipeline)),
        tensor=t,
        micro_batch=par.micro_batch,
    )

