from math import comb

import pytest
from hypothesis import given
from hypothesis import strategies as st

from vimoe.counting import count_flops, count_params, ffn_params, routing_degree
from vimoe.errors import ConfigError, ContractError
from vimoe.model import ModelConfig

S14 = ModelConfig.preset("vit-s-14")


def test_dense_total_equals_activated():
    r = count_params(S14)
    assert r.total_params == r.activated_params == 22_004_584


def test_head_toggle():
    with_head = count_params(S14).total_params
    without = count_params(S14, include_head=False).total_params
    assert with_head - without == 384 * 1000 + 1000


@given(st.integers(1, 16), st.integers(0, 11), st.booleans())
def test_total_affine_in_L(n, L, shared):
    c = S14.replace(num_experts=n, shared_expert=shared)
    step = count_params(c.replace(moe_last_L=L + 1)).total_params - \
        count_params(c.replace(moe_last_L=L)).total_params
    assert step == (n - 1 + shared) * ffn_params(c) + n * c.embed_dim


def test_activated_below_total():
    c = S14.replace(num_experts=4, moe_last_L=3)
    r = count_params(c)
    assert r.activated_params < r.total_params
    full = count_params(c.replace(top_k=4))
    assert full.activated_params == full.total_params


def test_doubling_k_doubles_expert_flops():
    c = S14.replace(num_experts=8, moe_last_L=4)
    dense = count_flops(c.replace(moe_last_L=0)).flops
    ffn = 257 * 2 * 384 * 1536
    gate = 8 * 384
    k1 = count_flops(c).flops - dense + 4 * ffn - 4 * gate
    k2 = count_flops(c.replace(top_k=2)).flops - dense + 4 * ffn - 4 * gate
    assert k2 == 2 * k1


def test_token_routing_gates_every_token():
    c = S14.replace(num_experts=8, moe_last_L=1)
    img = count_flops(c).flops
    tok = count_flops(c.replace(routing_mode="token")).flops
    assert tok - img == 256 * 8 * 384


def test_flops_resolution():
    assert count_flops(S14, 112).flops < count_flops(S14).flops
    with pytest.raises(ConfigError):
        count_flops(S14, 100)


def test_routing_degree():
    assert routing_degree(2, 1, 5) == 32
    assert routing_degree(8, 1, 2) == 64
    assert routing_degree(7, 3, 0) == 1
    with pytest.raises(ContractError):
        routing_degree(2, 3, 1)


@given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 6), st.integers(0, 6))
def test_degree_multiplicative(n, k, a, b):
    k = min(k, n)
    assert routing_degree(n, k, a + b) == routing_degree(n, k, a) * routing_degree(n, k, b)
    assert routing_degree(n, k, a) == comb(n, k) ** a


def test_csv_row():
    c = S14.replace(num_experts=8, moe_last_L=2, shared_expert=True)
    row = count_flops(c).csv_row(c)
    assert row[1:5] == [8, 2, 1, 1]
    assert row[5:7] == [40_915_816, 24_373_864]
