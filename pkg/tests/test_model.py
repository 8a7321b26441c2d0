import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from duplexsim.errors import ConfigError, InvalidArgument
from duplexsim.model import (
    PRESETS,
    StageComposition,
    WorkProfile,
    attention_cost,
    fc_cost,
    kv_cache_bytes,
    load_model,
    model_from_dict,
    moe_expert_cost,
    round_robin_counts,
    save_model,
    stage_layer_profiles,
    sum_profiles,
)


def naive_gemm_counts(tokens, in_dim, out_dim, precision=2):
    """Flops and bytes of a GEMM counted by walking every multiply-accumulate."""
    flops = 0
    weights, inputs, outputs = set(), set(), set()
    for t, i, o in itertools.product(range(tokens), range(in_dim), range(out_dim)):
        flops += 2
        weights.add((i, o))
        inputs.add((t, i))
        outputs.add((t, o))
    return flops, len(weights) * precision, (len(inputs) + len(outputs)) * precision


def naive_attention_counts(ctx, q, n_heads, d_head, grp, precision=2):
    flops = 0
    kv, qo = set(), set()
    for g in range(n_heads // grp):
        for r in range(grp * q):
            qo.add((g, r, "q"))
            qo.add((g, r, "o"))
            for c in range(ctx):
                for d in range(d_head):
                    flops += 2  # score q.k
                    flops += 2  # context p.v
                    kv.add((g, c, d, "k"))
                    kv.add((g, c, d, "v"))
    return flops, len(kv) * precision, len(qo) * d_head * precision


@pytest.mark.parametrize("dims", [(1, 3, 4), (5, 2, 7), (3, 6, 6)])
def test_fc_cost_matches_triple_loop(dims):
    prof = fc_cost(*dims)
    flops, wbytes, abytes = naive_gemm_counts(*dims)
    assert prof.flops == flops
    assert prof.weight_bytes == wbytes
    assert prof.act_bytes == abytes


def test_fc_cost_mixtral_ffn_shape():
    prof = fc_cost(64, 4096, 14336)
    assert prof.flops == 2 * 64 * 4096 * 14336
    assert prof.op_intensity == pytest.approx(62.73960612691466, rel=1e-12)
    assert prof.weight_op_intensity == 64


@pytest.mark.parametrize("case", [(4, 1, 4, 3, 2), (6, 6, 4, 2, 4), (5, 1, 6, 2, 6), (3, 2, 8, 2, 1)])
def test_attention_cost_matches_loop(case):
    ctx, q, heads, d, grp = case
    prof = attention_cost(ctx, q, heads, d, grp)
    flops, kv, qo = naive_attention_counts(ctx, q, heads, d, grp)
    assert prof.flops == flops
    assert prof.act_bytes == kv + qo


@pytest.mark.parametrize("tokens", [1, 8, 64])
@pytest.mark.parametrize("n_matrices", [2, 3])
def test_expert_weight_op_b_is_token_count(tokens, n_matrices):
    prof = moe_expert_cost(tokens, 4096, 14336, 2, n_matrices)
    assert prof.flops / prof.weight_bytes == tokens


@pytest.mark.parametrize("grp", [1, 4, 6, 8])
@pytest.mark.parametrize("ctx", [1, 17, 4096])
def test_decode_attention_kv_op_b_is_group_degree(grp, ctx):
    heads = 48
    prof = attention_cost(ctx, 1, heads, 128, grp)
    kv = (heads // grp) * 2 * ctx * 128 * 2
    assert prof.flops / kv == grp


def test_zero_token_expert_is_empty():
    prof = moe_expert_cost(0, 4096, 14336)
    assert prof.flops == 0 and prof.bytes == 0
    assert prof.kernel_class == "moe_expert"


def test_invalid_dims_rejected():
    with pytest.raises(InvalidArgument):
        fc_cost(0, 4, 4)
    with pytest.raises(InvalidArgument):
        attention_cost(2, 4, 8, 4, 2)
    with pytest.raises(InvalidArgument):
        attention_cost(4, 1, 6, 4, 4)
    with pytest.raises(InvalidArgument):
        moe_expert_cost(-1, 4, 4)


@pytest.mark.parametrize("name,params_b", [
    ("mixtral", 46.702526464), ("glam", 143.835267072), ("grok1", 316.488548352),
    ("opt", 66.156429312), ("llama3", 70.552387584),
])
def test_preset_parameter_counts(name, params_b):
    m = load_model(name)
    assert m.param_count() / 1e9 == pytest.approx(params_b, rel=1e-12)
    # within 3% of the nominal size in the preset
    assert m.param_count() == pytest.approx(m.total_params, rel=0.03)


def test_glam_alternates_moe_layers():
    m = load_model("glam")
    assert [m.is_moe_layer(i) for i in range(4)] == [False, True, False, True]
    assert m.n_moe_layers == m.n_layers // 2


def test_kv_cache_bytes_mixtral():
    m = load_model("mixtral")
    # 32 layers x (K,V) x 8 KV heads x 128 x fp16
    assert kv_cache_bytes(m, 1) == 32 * 2 * 1024 * 2
    assert kv_cache_bytes(m, 0) == 0


def test_model_roundtrip(tmp_path):
    m = load_model("mixtral")
    path = tmp_path / "m.json"
    save_model(m, path)
    assert load_model(path) == m
    assert model_from_dict(json.loads(path.read_text())) == m


def test_yaml_model_file(tmp_path):
    path = tmp_path / "m.yaml"
    path.write_text("name: tiny\ntotal_params: 1.0e6\nn_layers: 2\nhidden: 64\n"
                    "intermediate: 128\nn_heads: 4\nd_head: 16\nn_experts: 4\ntop_k: 2\n")
    m = load_model(path)
    assert m.n_experts == 4 and m.hidden == 64


def test_missing_field_names_it():
    with pytest.raises(ConfigError) as err:
        model_from_dict({"name": "x", "n_layers": 2})
    assert err.value.field.startswith("model.")
    with pytest.raises(ConfigError) as err:
        load_model("no-such-model")
    assert err.value.field == "model"


def test_stage_layer_profiles_structure():
    m = load_model("mixtral")
    stage = StageComposition(decode_ctx=(100, 200), prefill_lens=(50,))
    entries = stage_layer_profiles(m, stage)
    assert entries[0].layer == -1 and entries[-1].layer == m.n_layers
    experts = [e for e in entries if e.kernel_class == "moe_expert"]
    assert len(experts) == m.n_layers * m.n_experts
    per_layer = sum(e.profile.flops for e in experts if e.layer == 0)
    # every routed token does one full expert FFN
    assert per_layer == stage.tokens * m.top_k * 2 * 3 * m.hidden * m.intermediate
    attn = [e for e in entries if e.kernel_class == "attention" and e.layer == 3]
    assert len(attn) == 3


def test_round_robin_counts_sum():
    c = round_robin_counts(13, 8, 2)
    assert c.sum() == 26 and c.max() - c.min() <= 1


profiles = st.builds(WorkProfile, st.floats(0, 1e12), st.floats(0, 1e12), st.floats(0, 1e12))


@given(profiles, profiles, profiles)
def test_profile_addition_commutes(a, b, c):
    left, right = (a + b) + c, c + (b + a)
    assert left.flops == pytest.approx(right.flops)
    assert left.bytes == pytest.approx(right.bytes)


@given(profiles, st.floats(0, 10))
def test_scaled_is_linear(a, k):
    s = a.scaled(k)
    assert s.flops == pytest.approx(a.flops * k)
    assert s.bytes == pytest.approx(a.bytes * k)


@given(st.integers(1, 300), st.integers(1, 300))
@settings(max_examples=50)
def test_weight_op_b_of_fc_equals_tokens(tokens, width):
    prof = fc_cost(tokens, width, 2 * width)
    assert prof.weight_op_intensity == tokens


def test_sum_profiles():
    total = sum_profiles([fc_cost(1, 2, 3), fc_cost(2, 2, 3)])
    assert total.flops == 2 * 1 * 2 * 3 + 2 * 2 * 2 * 3
