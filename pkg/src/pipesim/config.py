"""Input configuration: model shape, parallelism, hardware, presets and layouts.

Config files are YAML with three sections (``model``, ``parallel``,
``hardware``) plus an optional top-level ``preset`` key whose values the
sections then override. Every key is flat; unknown keys are rejected.

Example::

    preset: gpt3-96b
    parallel:
      micro_batch: 2
      bpipe: true
    hardware:
      intra_node_bw: 3.0e+11
      efficiency.forward.recompute: 0.6
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import yaml

FFN_KINDS = ("gpt", "llama")
ATTENTION_MODES = ("none", "recompute", "flash")
PASSES = ("forward", "backward")

GiB = 1024**3


class ConfigParseError(Exception):
    """Raised when a config file cannot be read, decoded, or matched to the schema."""

    def __init__(self, message: str, path: Optional[Union[str, Path]] = None):
        self.path = str(path) if path is not None else None
        super().__init__(f"{self.path}: {message}" if self.path else message)


class LayoutError(ValueError):
    pass


def default_efficiency() -> Dict[Tuple[str, str], float]:
    return {(ps, mode): 1.0 for ps in PASSES for mode in ATTENTION_MODES}


@dataclass(frozen=True)
class ModelConfig:
    name: str
    num_heads: int
    hidden: int
    layers: int
    seq_len: int
    vocab: int
    ffn_kind: str = "gpt"


@dataclass(frozen=True)
class ParallelConfig:
    tensor: int
    pipeline: int
    micro_batch: int
    global_batch: int
    attention_mode: str = "none"
    bpipe: bool = False

    @property
    def num_microbatches(self) -> int:
        return self.global_batch // self.micro_batch


@dataclass(frozen=True)
class HardwareProfile:
    peak_flops: float
    mem_per_device: float
    intra_node_bw: float
    inter_node_bw: float
    gpus_per_node: int
    efficiency: Dict[Tuple[str, str], float] = field(default_factory=default_efficiency)

    def eff(self, pass_: str, mode: str) -> float:
        return self.efficiency.get((pass_, mode), 1.0)


@dataclass(frozen=True)
class DeviceLayout:
    """Stage index -> (node index, local device index)."""

    stage_to_device: Tuple[Tuple[int, int], ...]
    gpus_per_node: int

    @property
    def p(self) -> int:
        return len(self.stage_to_device)

    def node(self, stage: int) -> int:
        return self.stage_to_device[stage][0]

    def co_located(self, a: int, b: int) -> bool:
        return self.node(a) == self.node(b)


@dataclass(frozen=True)
class Violation:
    invariant: str
    values: Dict[str, Any]

    def __str__(self) -> str:
        detail = ", ".join(f"{k}={v!r}" for k, v in self.values.items())
        return f"{self.invariant} ({detail})" if detail else self.invariant


@dataclass(frozen=True)
class ValidatedConfig:
    model: ModelConfig
    parallel: ParallelConfig
    hardware: HardwareProfile
    warnings: Tuple[str, ...] = ()


# Presets

# v is not given for either model; these are conventional vocab sizes.
MODEL_PRESETS: Dict[str, ModelConfig] = {
    "llama-65b": ModelConfig("llama-65b", num_heads=64, hidden=8192, layers=80,
                             seq_len=2048, vocab=32000, ffn_kind="llama"),
    "gpt3-96b": ModelConfig("gpt3-96b", num_heads=104, hidden=9984, layers=80,
                            seq_len=2048, vocab=51200, ffn_kind="gpt"),
}

PARALLEL_PRESETS: Dict[str, ParallelConfig] = {
    "llama-65b": ParallelConfig(tensor=4, pipeline=8, micro_batch=1, global_batch=128,
                                attention_mode="none"),
    "gpt3-96b": ParallelConfig(tensor=4, pipeline=8, micro_batch=1, global_batch=128,
                               attention_mode="recompute"),
}


def a100_80gb() -> HardwareProfile:
    """8x A100-80GB nodes: bf16 dense peak, NVLink3 per direction, 200 Gb/s NIC per GPU."""
    return HardwareProfile(
        peak_flops=312e12,
        mem_per_device=80 * GiB,
        intra_node_bw=300e9,
        inter_node_bw=25e9,
        gpus_per_node=8,
    )


PRESETS = tuple(MODEL_PRESETS)


def load_preset(name: str) -> Tuple[ModelConfig, ParallelConfig, HardwareProfile]:
    if name not in MODEL_PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return MODEL_PRESETS[name], PARALLEL_PRESETS[name], a100_80gb()


# Validation


def _is_pos_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool) and x > 0


def _is_pos_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x) and x > 0


def check_config(model: ModelConfig, par: ParallelConfig, hw: HardwareProfile) -> List[Violation]:
    """Return every violated invariant; an empty list means the bundle is valid."""
    out: List[Violation] = []

    for fname in ("num_heads", "hidden", "layers", "seq_len", "vocab"):
        val = getattr(model, fname)
        if not _is_pos_int(val):
            out.append(Violation(f"model.{fname} must be a positive integer", {fname: val}))
    if model.ffn_kind not in FFN_KINDS:
        out.append(Violation("model.ffn_kind must be one of gpt|llama", {"ffn_kind": model.ffn_kind}))

    for fname in ("tensor", "pipeline", "micro_batch", "global_batch"):
        val = getattr(par, fname)
        if not _is_pos_int(val):
            out.append(Violation(f"parallel.{fname} must be a positive integer", {fname: val}))
    if par.attention_mode not in ATTENTION_MODES:
        out.append(Violation("parallel.attention_mode must be one of none|recompute|flash",
                             {"attention_mode": par.attention_mode}))
    if not isinstance(par.bpipe, bool):
        out.append(Violation("parallel.bpipe must be a boolean", {"bpipe": par.bpipe}))

    for fname in ("peak_flops", "mem_per_device", "intra_node_bw", "inter_node_bw"):
        val = getattr(hw, fname)
        if not _is_pos_num(val):
            out.append(Violation(f"hardware.{fname} must be a positive number", {fname: val}))
    if not _is_pos_int(hw.gpus_per_node):
        out.append(Violation("hardware.gpus_per_node must be a positive integer",
                             {"gpus_per_node": hw.gpus_per_node}))
    for key, val in sorted(hw.efficiency.items()):
        if key[0] not in PASSES or key[1] not in ATTENTION_MODES:
            out.append(Violation("hardware.efficiency key must be (forward|backward, mode)", {"key": key}))
        elif not (_is_pos_num(val) and val <= 1):
            out.append(Violation("hardware.efficiency must lie in (0, 1]",
                                 {"key": ".".join(key), "value": val}))

    # Divisibility checks only make sense once the operands are sane.
    h, a, l = model.hidden, model.num_heads, model.layers
    t, p, b, B = par.tensor, par.pipeline, par.micro_batch, par.global_batch
    if _is_pos_int(h) and _is_pos_int(a) and h % a != 0:
        out.append(Violation("h mod a != 0", {"h": h, "a": a}))
    if _is_pos_int(B) and _is_pos_int(b) and B % b != 0:
        out.append(Violation("B mod b != 0", {"B": B, "b": b}))
    if _is_pos_int(l) and _is_pos_int(p) and l % p != 0:
        out.append(Violation("l mod p != 0", {"l": l, "p": p}))
    if _is_pos_int(t):
        if _is_pos_int(a) and a % t != 0:
            out.append(Violation("a mod t != 0", {"a": a, "t": t}))
        if _is_pos_int(h) and h % t != 0:
            out.append(Violation("h mod t != 0", {"h": h, "t": t}))

    # Keeps backward at least as slow as forward (backward does 2x the FLOPs).
    if all(_is_pos_num(v) for v in hw.efficiency.values()):
        for mode in ATTENTION_MODES:
            ef, eb = hw.eff("forward", mode), hw.eff("backward", mode)
            if eb > 2 * ef:
                out.append(Violation("efficiency.backward > 2 * efficiency.forward",
                                     {"mode": mode, "forward": ef, "backward": eb}))
    return out


def validate_config(model: ModelConfig, par: ParallelConfig,
                    hw: HardwareProfile) -> Union[ValidatedConfig, List[Violation]]:
    """Validate a config bundle.

    Never raises: returns a :class:`ValidatedConfig` when every invariant holds,
    otherwise the full list of :class:`Violation` objects. A microbatch count
    below the pipeline depth is legal but produces a warning on the bundle.
    """
    try:
        violations = check_config(model, par, hw)
    except Exception as exc:  # malformed objects (e.g. efficiency not a mapping)
        return [Violation("config could not be checked", {"error": str(exc)})]
    if violations:
        return violations
    warnings = []
    m = par.global_batch // par.micro_batch
    if m < par.pipeline:
        warnings.append(f"m = B/b = {m} < p = {par.pipeline}: schedule is bubble-dominated")
    if par.bpipe and par.pipeline > hw.gpus_per_node:
        try:
            pair_adjacent_layout(par.pipeline, hw.gpus_per_node)
        except LayoutError as exc:
            warnings.append(f"pair-adjacent layout infeasible: {exc}")
    return ValidatedConfig(model, par, hw, tuple(warnings))


# Device layout


def contiguous_layout(p: int, gpus_per_node: int) -> DeviceLayout:
    return DeviceLayout(tuple((x // gpus_per_node, x % gpus_per_node) for x in range(p)), gpus_per_node)


def pair_adjacent_layout(p: int, gpus_per_node: int, num_nodes: Optional[int] = None) -> DeviceLayout:
    """Place every evictor/acceptor pair ``(x, p-1-x)`` on a single node.

    Pairs are packed onto nodes in order of ``x``; an odd middle stage takes
    any leftover slot. Local device indices follow stage order within a node.
    ``num_nodes`` defaults to the fewest nodes that can hold ``p`` devices.
    """
    if p < 1 or gpus_per_node < 1:
        raise LayoutError(f"p and gpus_per_node must be positive (p={p}, gpus_per_node={gpus_per_node})")
    if num_nodes is None:
        num_nodes = -(-p // gpus_per_node)
    if p > gpus_per_node * num_nodes:
        raise LayoutError(f"p={p} exceeds {num_nodes} nodes x {gpus_per_node} devices")
    if p <= gpus_per_node:
        return contiguous_layout(p, gpus_per_node)

    free = [gpus_per_node] * num_nodes
    node_of: Dict[int, int] = {}
    node = 0
    for x in range(p // 2):
        while node < num_nodes and free[node] < 2:
            node += 1
        if node == num_nodes:
            raise LayoutError(f"cannot co-locate pair ({x}, {p - 1 - x}) with "
                              f"{gpus_per_node} devices per node on {num_nodes} nodes")
        node_of[x] = node_of[p - 1 - x] = node
        free[node] -= 2
    if p % 2:
        mid = p // 2
        node_of[mid] = next(n for n in range(num_nodes) if free[n] > 0)
        free[node_of[mid]] -= 1

    mapping = []
    for x in range(p):
        n = node_of[x]
        local = sum(1 for y in range(x) if node_of[y] == n)
        mapping.append((n, local))
    return DeviceLayout(tuple(mapping), gpus_per_node)


def layout_for(par: ParallelConfig, hw: HardwareProfile) -> DeviceLayout:
    if par.bpipe:
        return pair_adjacent_layout(par.pipeline, hw.gpus_per_node)
    return contiguous_layout(par.pipeline, hw.gpus_per_node)


# Config files

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_PARALLEL_KEYS = {f.name for f in dataclasses.fields(ParallelConfig)}
_HW_KEYS = {f.name for f in dataclasses.fields(HardwareProfile)} - {"efficiency"}
_EFF_KEYS = {f"efficiency.{ps}.{mode}" for ps in PASSES for mode in ATTENTION_MODES}
_REQUIRED_MODEL = {"num_heads", "hidden", "layers", "seq_len"}
_DEFAULT_VOCAB = {"gpt": 51200, "llama": 32000}


def _section(doc: dict, name: str, path) -> dict:
    sec = doc.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigParseError(f"section {name!r} must be a mapping", path)
    return sec


def parse_config(doc: Any, path=None) -> Tuple[ModelConfig, ParallelConfig, HardwareProfile]:
    """Build config objects from a decoded YAML document (no validation)."""
    if not isinstance(doc, dict):
        raise ConfigParseError("top level must be a mapping with model/parallel/hardware sections", path)
    unknown = set(doc) - {"preset", "model", "parallel", "hardware"}
    if unknown:
        raise ConfigParseError(f"unknown top-level keys: {', '.join(sorted(map(str, unknown)))}", path)

    msec, psec, hsec = (_section(doc, n, path) for n in ("model", "parallel", "hardware"))
    for sec, allowed, label in ((msec, _MODEL_KEYS, "model"), (psec, _PARALLEL_KEYS, "parallel"),
                                (hsec, _HW_KEYS | _EFF_KEYS, "hardware")):
        bad = set(sec) - allowed
        if bad:
            raise ConfigParseError(f"unknown {label} keys: {', '.join(sorted(map(str, bad)))}", path)

    preset = doc.get("preset")
    if preset is not None:
        try:
            model, par, hw = load_preset(preset)
        except KeyError as exc:
            raise ConfigParseError(exc.args[0], path) from None
        model = dataclasses.replace(model, **msec)
        par = dataclasses.replace(par, **psec)
    else:
        missing = _REQUIRED_MODEL - set(msec)
        if missing:
            raise ConfigParseError(f"missing model keys: {', '.join(sorted(missing))}", path)
        if "global_batch" not in psec:
            raise ConfigParseError("missing parallel key: global_batch", path)
        ffn_kind = msec.get("ffn_kind", "gpt")
        model = ModelConfig(**{"name": "custom", "ffn_kind": ffn_kind,
                               "vocab": _DEFAULT_VOCAB.get(ffn_kind, 51200), **msec})
        par = ParallelConfig(**{"tensor": 1, "pipeline": 1, "micro_batch": 1, **psec})
        hw = a100_80gb()

    eff = dict(hw.efficiency)
    plain = {}
    for key, val in hsec.items():
        if key in _EFF_KEYS:
            _, ps, mode = key.split(".")
            eff[(ps, mode)] = val
        else:
            plain[key] = val
    # YAML 1.1 reads ``312e12`` (no dot, no sign) as a string.
    for key, val in list(plain.items()) + [(k, v) for k, v in eff.items()]:
        if isinstance(val, str):
            try:
                num = float(val)
            except ValueError:
                continue
            if isinstance(key, tuple):
                eff[key] = num
            else:
                plain[key] = num
    hw = dataclasses.replace(hw, efficiency=eff, **plain)
    return model, par, hw


def load_config(path: Union[str, Path]) -> Tuple[ModelConfig, ParallelConfig, HardwareProfile]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigParseError(f"cannot read file: {exc.strerror or exc}", path) from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigParseError(f"not UTF-8 at byte offset {exc.start}", path) from exc
    if not text.strip():
        raise ConfigParseError("empty config at byte offset 0", path)
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at byte offset {len(text[:mark.index].encode())}" if mark is not None else ""
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigParseError(f"YAML parse error{where}: {problem}", path) from exc
    try:
        return parse_config(doc, path)
    except TypeError as exc:
        raise ConfigParseError(str(exc), path) from exc


def dump_config(model: ModelConfig, par: ParallelConfig, hw: HardwareProfile) -> str:
    hsec: Dict[str, Any] = {k: getattr(hw, k) for k in sorted(_HW_KEYS)}
    for (ps, mode), val in sorted(hw.efficiency.items()):
        hsec[f"efficiency.{ps}.{mode}"] = val
    doc = {"model": dataclasses.asdict(model), "parallel": dataclasses.asdict(par), "hardware": hsec}
    return yaml.safe_dump(doc, sort_keys=False)
