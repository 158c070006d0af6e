from types import SimpleNamespace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ragkv.costmodel import compare, flops
from ragkv.model import QWEN2_7B_CONFIG, TOY_CONFIG

ONES = SimpleNamespace(hidden_size=1, head_num=1, kv_head_num=1, head_size=1, intermediate_size=1, layer_num=1)

# published figures for a 7B Qwen2-class model at 8192 chunk + 128 query tokens
PUBLISHED_REDUCTION = 98.46
PUBLISHED_NAIVE_TFLOPS = {1: 136.36, 2: 272.72, 4: 545.46, 6: 818.20, 8: 1090.93}
PUBLISHED_TURBO_TFLOPS = {1: 2.09, 2: 4.19, 4: 8.39, 6: 12.58, 8: 16.78}


def test_unit_dims():
    # 2*1*3*1 + 2*1*1*1 + 2 + 6 = 16
    r = flops(ONES, 1, 1)
    assert (r.c_qkv, r.c_attn, r.c_o, r.c_mlp, r.total) == (6, 2, 2, 6, 16)


def test_hand_computed_toy():
    # h=64, H=8, KV=2, d=8, I=128, L=4, n_in=3, n_ctx=10
    r = flops(TOY_CONFIG, 3, 10)
    assert r.c_qkv == 2 * 64 * 12 * 8 == 12288
    assert r.c_attn == 2 * 8 * 8 * 10 == 1280
    assert r.c_o == 8192 and r.c_mlp == 49152
    assert r.total == 3 * 4 * (12288 + 1280 + 8192 + 49152)


def test_qwen_reduction():
    cmp = compare(QWEN2_7B_CONFIG, 8192, 128)
    assert abs(cmp.reduction_percent - PUBLISHED_REDUCTION) <= 0.5
    assert cmp.naive.n_context == cmp.turbo.n_context == 8320


def test_qwen_absolute_within_15_percent():
    for b, ref in PUBLISHED_NAIVE_TFLOPS.items():
        cmp = compare(QWEN2_7B_CONFIG, 8192, 128, b)
        assert abs(cmp.naive.tflops - ref) / ref <= 0.15
        assert abs(cmp.turbo.tflops - PUBLISHED_TURBO_TFLOPS[b]) / PUBLISHED_TURBO_TFLOPS[b] <= 0.15


@given(st.integers(1, 64), st.integers(0, 5000), st.integers(1, 16))
def test_batch_linear(q, extra, b):
    one = flops(QWEN2_7B_CONFIG, q, q + extra)
    assert flops(QWEN2_7B_CONFIG, q, q + extra, b).total == b * one.total


@given(st.integers(1, 500), st.integers(0, 500))
def test_monotone_in_context(n_in, extra):
    a = flops(TOY_CONFIG, n_in, n_in + extra)
    b = flops(TOY_CONFIG, n_in, n_in + extra + 1)
    assert b.total > a.total


def test_layer_terms_independent_of_layer_num():
    cfg = SimpleNamespace(**{**vars(ONES), "hidden_size": 8, "head_size": 4, "head_num": 2, "layer_num": 1})
    deep = SimpleNamespace(**{**vars(cfg), "layer_num": 7})
    a, b = flops(cfg, 5, 9), flops(deep, 5, 9)
    assert a.per_token_layer == b.per_token_layer and b.total == 7 * a.total


def test_no_chunks_means_no_saving():
    assert compare(TOY_CONFIG, 0, 10).reduction_percent == 0.0


def test_ramp_is_smaller():
    full, ramp = flops(TOY_CONFIG, 10, 10), flops(TOY_CONFIG, 10, 10, ramp=True)
    assert ramp.total < full.total
    # the first of ten causal tokens sees 1 position, the last sees 10: 55 in all
    attn = 2 * TOY_CONFIG.head_num * TOY_CONFIG.head_size * 55 * TOY_CONFIG.layer_num
    dense = 10 * TOY_CONFIG.layer_num * (full.c_qkv + full.c_o + full.c_mlp)
    assert ramp.total == dense + attn


@pytest.mark.parametrize("args", [(0, 1), (1, 0), (5, 4), (1, 1, 0)])
def test_invalid(args):
    with pytest.raises(ValueError):
        flops(TOY_CONFIG, *args)


def test_compare_invalid():
    with pytest.raises(ValueError):
        compare(TOY_CONFIG, -1, 5)
    with pytest.raises(ValueError):
        compare(TOY_CONFIG, 10, 0)
