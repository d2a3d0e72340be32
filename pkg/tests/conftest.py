from fractions import Fraction

import pytest

from pipesim.config import HardwareProfile, load_preset
from pipesim.costmodel import StageCost


def make_cost(t_f=1, t_b=2, act=0, static=0, p=1, model_flops=None, tensor=1, b=1):
    """Synthetic stage cost with times in seconds."""
    return StageCost(
        fwd_time=Fraction(t_f),
        bwd_time=Fraction(t_b),
        flops_fwd=Fraction(1),
        flops_bwd=Fraction(2),
        model_flops=Fraction(3) if model_flops is None else Fraction(model_flops),
        act_bytes_per_mb=Fraction(act),
        static_bytes=tuple(Fraction(static) for _ in range(p)),
        tensor=tensor,
        micro_batch=b,
    )


@pytest.fixture
def hw():
    return HardwareProfile(peak_flops=1e15, mem_per_device=80e9, intra_node_bw=1e12,
                           inter_node_bw=1e11, gpus_per_node=8)


@pytest.fixture
def gpt3():
    return load_preset("gpt3-96b")


@pytest.fixture
def llama():
    return load_preset("llama-65b")


ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(line)
