import dataclasses
import itertools

import pytest

from pipesim.config import (
    ConfigParseError,
    LayoutError,
    ModelConfig,
    ParallelConfig,
    ValidatedConfig,
    a100_80gb,
    contiguous_layout,
    dump_config,
    load_config,
    load_preset,
    pair_adjacent_layout,
    validate_config,
)


def co_located_pairs(layout):
    p = layout.p
    return all(layout.node(x) == layout.node(p - 1 - x) for x in range(p // 2))


def is_bijection(layout):
    return len(set(layout.stage_to_device)) == layout.p and all(
        0 <= local < layout.gpus_per_node for _, local in layout.stage_to_device)


def test_llama_preset_matches_table():
    model, par, hw = load_preset("llama-65b")
    assert (model.hidden, model.num_heads, model.seq_len, model.layers) == (8192, 64, 2048, 80)
    assert (par.tensor, par.pipeline, par.global_batch) == (4, 8, 128)
    assert model.ffn_kind == "llama"


def test_gpt3_preset_matches_table():
    model, par, _ = load_preset("gpt3-96b")
    assert (model.hidden, model.num_heads, model.seq_len, model.layers) == (9984, 104, 2048, 80)
    assert par.global_batch == 128


def test_llama_b2_valid():
    model, par, hw = load_preset("llama-65b")
    res = validate_config(model, dataclasses.replace(par, micro_batch=2), hw)
    assert isinstance(res, ValidatedConfig)
    assert res.warnings == ()


def test_heads_must_divide_hidden():
    model, par, hw = load_preset("llama-65b")
    res = validate_config(dataclasses.replace(model, num_heads=63), par, hw)
    assert isinstance(res, list)
    assert any(v.invariant == "h mod a != 0" for v in res)
    # a=63 also breaks the tensor split
    assert any(v.invariant == "a mod t != 0" for v in res)


def test_microbatch_must_divide_global_batch():
    model, par, hw = load_preset("llama-65b")
    res = validate_config(model, dataclasses.replace(par, micro_batch=3), hw)
    assert [v.invariant for v in res] == ["B mod b != 0"]
    assert res[0].values == {"B": 128, "b": 3}
    assert "B=128" in str(res[0])


def test_uneven_layer_split_rejected():
    model, par, hw = load_preset("gpt3-96b")
    res = validate_config(model, dataclasses.replace(par, pipeline=3), hw)
    assert any(v.invariant == "l mod p != 0" for v in res)


def test_few_microbatches_warns_not_fails():
    model, par, hw = load_preset("gpt3-96b")
    res = validate_config(model, dataclasses.replace(par, global_batch=4, micro_batch=1), hw)
    assert isinstance(res, ValidatedConfig)
    assert any("bubble" in w for w in res.warnings)


def test_efficiency_range():
    model, par, hw = load_preset("gpt3-96b")
    eff = dict(hw.efficiency)
    eff[("forward", "none")] = 0.0
    res = validate_config(model, par, dataclasses.replace(hw, efficiency=eff))
    assert any("efficiency" in v.invariant for v in res)


@pytest.mark.parametrize("bad", [
    dict(hidden=-1), dict(hidden="big"), dict(layers=0), dict(vocab=None), dict(ffn_kind="moe"),
])
def test_validate_is_total(bad):
    model, par, hw = load_preset("gpt3-96b")
    res = validate_config(dataclasses.replace(model, **bad), par, hw)
    assert isinstance(res, list) and res


def test_validate_total_on_garbage_objects():
    model, par, hw = load_preset("gpt3-96b")
    res = validate_config(model, par, dataclasses.replace(hw, efficiency=None))
    assert isinstance(res, list) and res


# layout


def test_layout_single_node_identity():
    lay = pair_adjacent_layout(8, 8)
    assert lay.stage_to_device == tuple((0, x) for x in range(8))


def test_layout_16_on_two_nodes():
    lay = pair_adjacent_layout(16, 8)
    node0 = {x for x in range(16) if lay.node(x) == 0}
    assert node0 == {0, 1, 2, 3, 12, 13, 14, 15}
    assert {x for x in range(16) if lay.node(x) == 1} == set(range(4, 12))
    assert is_bijection(lay)
    # exhaustive predicate over every pair
    for x in range(16):
        assert lay.node(x) == lay.node(15 - x)


def test_layout_4_on_two_nodes():
    lay = pair_adjacent_layout(4, 2)
    assert {x for x in range(4) if lay.node(x) == 0} == {0, 3}
    assert {x for x in range(4) if lay.node(x) == 1} == {1, 2}


@pytest.mark.parametrize("p,g", [(p, g) for p in range(1, 33) for g in (2, 4, 8) if p % 2 == 0 or g > 2])
def test_layout_property(p, g):
    lay = pair_adjacent_layout(p, g)
    assert is_bijection(lay)
    assert co_located_pairs(lay)
    assert max(lay.node(x) for x in range(p)) < -(-p // g)


def test_layout_odd_p_middle_unpaired():
    lay = pair_adjacent_layout(9, 4, num_nodes=3)
    assert is_bijection(lay) and co_located_pairs(lay)


def test_layout_infeasible_names_pair():
    # one pair per 3-device node; the third pair has nowhere to go
    with pytest.raises(LayoutError, match=r"\(2, 3\)"):
        pair_adjacent_layout(6, 3)


def test_contiguous_layout():
    lay = contiguous_layout(16, 8)
    assert lay.node(7) == 0 and lay.node(8) == 1


# config files


def test_config_roundtrip(tmp_path):
    model, par, hw = load_preset("llama-65b")
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(model, par, hw))
    assert load_config(path) == (model, par, hw)


def test_config_preset_override(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("preset: gpt3-96b\nparallel:\n  micro_batch: 2\n"
                    "hardware:\n  peak_flops: 312e12\n  efficiency.forward.recompute: 0.5\n")
    model, par, hw = load_config(path)
    assert model.hidden == 9984 and par.micro_batch == 2
    assert hw.peak_flops == 312e12
    assert hw.eff("forward", "recompute") == 0.5


def test_config_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("model:\n  num_heads: 8\n  hidden: 512\n  layers: 4\n  seq_len: 128\n"
                    "  ffn_kind: llama\nparallel:\n  global_batch: 16\n")
    model, par, hw = load_config(path)
    assert model.vocab == 32000
    assert (par.tensor, par.pipeline, par.micro_batch, par.bpipe) == (1, 1, 1, False)
    assert hw == a100_80gb()


@pytest.mark.parametrize("text,match", [
    ("", "byte offset 0"),
    ("model: [1, 2\n", "byte offset"),
    ("model:\n  hidden: 1\n  colour: red\n", "unknown model keys: colour"),
    ("extra: 1\n", "unknown top-level"),
    ("model:\n  hidden: 8\nparallel:\n  global_batch: 1\n", "missing model keys"),
    ("preset: nope\n", "unknown preset"),
    ("- 1\n- 2\n", "top level"),
])
def test_config_parse_errors(tmp_path, text, match):
    path = tmp_path / "c.yaml"
    path.write_text(text)
    with pytest.raises(ConfigParseError, match=match):
        load_config(path)


def test_config_missing_file(tmp_path):
    with pytest.raises(ConfigParseError, match="cannot read"):
        load_config(tmp_path / "nope.yaml")
