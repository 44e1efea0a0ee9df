import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vimoe import numerics as nx
from vimoe.errors import ConfigError, ContractError
from vimoe.moe import (AuxLossAccumulator, MoELayer, gate, load_balance_loss, moe_forward,
                       route_input, top_k_indices, total_aux_loss)
from vimoe.vit import FFN, ffn_forward

from conftest import check_grads

ALPHA = 0.01


def make_layer(rng, n=4, d=6, hidden=12, k=1, shared=False, identical=False, **kw):
    base = FFN.init(rng, d, hidden)
    for p in (base.fc1_w, base.fc2_w):
        p.data *= 10
    experts = [base.copy() if identical else FFN.init(rng, d, hidden) for _ in range(n)]
    sh = FFN.init(rng, d, hidden) if shared else None
    return MoELayer(nx.parameter(np.zeros((n, d))), experts, sh, k=k, **kw), base


def brute_aux(prob_rows, alpha):
    """Direct double loop over tokens and experts."""
    t, n = len(prob_rows), len(prob_rows[0])
    f = [0.0] * n
    P = [0.0] * n
    for row in prob_rows:
        best = max(range(n), key=lambda i: (row[i], -i))
        f[best] += 1.0 / t
        for i in range(n):
            P[i] += row[i] / t
    return alpha * n * sum(fi * pi for fi, pi in zip(f, P))


def acc_of(rows, alpha=ALPHA):
    acc = AuxLossAccumulator(len(rows[0]), alpha)
    acc.add(np.asarray(rows, dtype=float))
    return acc


# -- gate ------------------------------------------------------------------------

def test_zero_gate_is_uniform_and_picks_expert_zero(rng):
    layer, _ = make_layer(rng)
    dec = gate(rng.normal(size=(3, 6)), layer)
    assert np.array_equal(dec.probs.data, np.full((3, 4), 0.25))
    assert dec.top1.tolist() == [0, 0, 0]


def test_single_expert_gate(rng):
    layer, _ = make_layer(rng, n=1)
    layer.gate_w.data[...] = rng.normal(size=(1, 6))
    assert gate(rng.normal(size=6), layer).probs.data.tolist() == [[1.0]]


def test_top2_renormalized_weights():
    layer = MoELayer(nx.tensor(np.zeros((4, 1))),
                     [FFN.init(np.random.default_rng(0), 1, 2) for _ in range(4)], k=2)
    layer.gate_w.data[:, 0] = [2.0, 1.0, 0.0, -1.0]
    dec = gate(np.array([1.0]), layer)
    assert dec.selected.tolist() == [[0, 1]]
    e = np.exp([2.0, 1.0])
    assert np.allclose(dec.weights.data, [e / e.sum()], atol=1e-15)
    layer.renorm_mode = "none"
    raw = gate(np.array([1.0]), layer)
    p = np.exp([2.0, 1.0, 0.0, -1.0])
    assert np.allclose(raw.weights.data, [(p / p.sum())[:2]], atol=1e-15)


def test_top_k_ties_go_to_smaller_index():
    probs = np.array([[0.3, 0.3, 0.4], [0.5, 0.25, 0.25]])
    assert top_k_indices(probs, 2).tolist() == [[2, 0], [0, 1]]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 4), elements=st.floats(-3, 3)), st.integers(1, 4),
       st.floats(-10, 10))
def test_gate_decision_invariants(x, k, shift):
    rng = np.random.default_rng(0)
    layer, _ = make_layer(rng, n=4, d=4, k=k)
    layer.gate_w.data[...] = rng.normal(size=(4, 4))
    dec = gate(x, layer)
    p = dec.probs.data
    assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-12)
    assert np.all(np.abs(dec.weights.data.sum(axis=1) - 1) <= 1e-12)
    for row, sel in zip(p, dec.selected):
        assert sorted(row[sel]) == sorted(np.sort(row)[-k:])
    # constant shift of the logits keeps the argmax
    shifted = nx.softmax(nx.tensor(x @ layer.gate_w.data.T + shift)).data
    assert np.array_equal(np.argmax(shifted, axis=1), np.argmax(p, axis=1))
    again = gate(x, layer)
    assert np.array_equal(again.selected, dec.selected)
    assert again.probs.data.tobytes() == p.tobytes()


def test_bad_layer_configs(rng):
    with pytest.raises(ConfigError):
        make_layer(rng, n=2, k=3)
    with pytest.raises(ConfigError):
        make_layer(rng, routing_mode="pixel")


# -- routing input and forward ----------------------------------------------------

def test_route_input_shapes(rng):
    h = nx.tensor(rng.normal(size=(17, 6)))
    assert route_input(h, "image").shape == (1, 6)
    assert route_input(h, "token").shape == (17, 6)
    hb = nx.tensor(rng.normal(size=(3, 17, 6)))
    assert route_input(hb, "image").shape == (3, 6)
    assert route_input(hb, "token").shape == (51, 6)


def test_image_routing_ignores_non_cls_rows(rng):
    layer, _ = make_layer(rng)
    layer.gate_w.data[...] = rng.normal(size=(4, 6))
    h = rng.normal(size=(17, 6))
    dec = gate(route_input(nx.tensor(h), "image"), layer)
    h2 = h.copy()
    h2[1:] += rng.normal(size=(16, 6))
    dec2 = gate(route_input(nx.tensor(h2), "image"), layer)
    assert np.array_equal(dec.selected, dec2.selected)
    assert dec.probs.data.tobytes() == dec2.probs.data.tobytes()


def test_single_expert_is_exact(rng):
    for mode in ("topk", "none"):
        layer, _ = make_layer(rng, n=1, renorm_mode=mode)
        x = nx.tensor(rng.normal(size=(5, 6)))
        y, _ = moe_forward(x, route_input(x, "image"), layer)
        assert np.array_equal(y.data, ffn_forward(x, layer.experts[0]).data)


def test_identical_experts_reproduce_dense(rng):
    layer, base = make_layer(rng, identical=True, routing_mode="token")
    layer.gate_w.data[...] = rng.normal(size=(4, 6))
    x = nx.tensor(rng.normal(size=(2, 5, 6)))
    y, dec = moe_forward(x, route_input(x, "token"), layer)
    assert len(set(dec.top1.tolist())) > 1
    assert np.max(np.abs(y.data - ffn_forward(x, base).data)) < 1e-12


def test_no_renorm_scales_by_one_over_n(rng):
    layer, base = make_layer(rng, identical=True, renorm_mode="none")
    x = nx.tensor(rng.normal(size=(5, 6)))
    y, _ = moe_forward(x, route_input(x, "image"), layer)
    assert np.max(np.abs(y.data - 0.25 * ffn_forward(x, base).data)) < 1e-15


def test_shared_expert_added_with_unit_weight(rng):
    layer, _ = make_layer(rng, shared=True)
    layer.gate_w.data[...] = rng.normal(size=(4, 6))
    x = nx.tensor(rng.normal(size=(5, 6)))
    y, dec = moe_forward(x, route_input(x, "image"), layer)
    e = layer.experts[dec.top1[0]]
    expected = ffn_forward(x, e).data + ffn_forward(x, layer.shared).data
    assert np.max(np.abs(y.data - expected)) < 1e-13


def test_image_mode_uses_one_decision_per_image(rng):
    layer, _ = make_layer(rng, n=3)
    layer.gate_w.data[...] = rng.normal(size=(3, 6)) * 5
    x = nx.tensor(rng.normal(size=(6, 4, 6)))
    y, dec = moe_forward(x, route_input(x, "image"), layer)
    assert dec.selected.shape == (6, 1)
    for b in range(6):
        e = layer.experts[dec.top1[b]]
        w = dec.weights.data[b, 0]
        assert np.allclose(y.data[b], w * ffn_forward(x[b], e).data, atol=1e-13)


def test_gate_gradient_with_aux_loss(rng):
    layer, _ = make_layer(rng, k=2, shared=True, routing_mode="token", renorm_mode="none")
    layer.gate_w.data[...] = rng.normal(size=(4, 6))
    x = nx.parameter(rng.normal(size=(2, 3, 6)))
    target = nx.tensor(rng.normal(size=(2, 3, 6)))

    def loss():
        y, dec = moe_forward(x, route_input(x, "token"), layer)
        acc = AuxLossAccumulator(4, 0.5)
        acc.add(dec.probs)
        return (y * target).sum() + load_balance_loss(acc)

    params = [layer.gate_w, layer.experts[0].fc1_w, layer.shared.fc2_w, x]
    check_grads(loss, params, rng, samples=6)


# -- balancing loss -----------------------------------------------------------------

def test_uniform_routing_gives_alpha():
    acc = AuxLossAccumulator(4, ALPHA)
    acc.counts[:] = 2            # f uniform by construction
    acc._probs.append(nx.tensor(np.full((8, 4), 0.25)))
    assert load_balance_loss(acc).item() == ALPHA


def test_collapse_gives_alpha_n():
    rows = np.zeros((5, 3))
    rows[:, 1] = 1.0
    assert load_balance_loss(acc_of(rows)).item() == pytest.approx(3 * ALPHA, rel=1e-15)


def test_hand_example():
    acc = acc_of([(0.9, 0.1), (0.8, 0.2), (0.6, 0.4), (0.3, 0.7)])
    assert acc.f.tolist() == [0.75, 0.25]
    assert np.allclose(acc.P, [0.65, 0.35], atol=1e-15)
    assert abs(load_balance_loss(acc).item() - 1.15 * ALPHA) < 1e-15


def test_empty_accumulator_raises():
    with pytest.raises(ContractError):
        load_balance_loss(AuxLossAccumulator(2, ALPHA))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 20), st.integers(0, 2**31 - 1))
def test_matches_brute_force(n, t, seed):
    rows = np.random.default_rng(seed).dirichlet(np.ones(n), size=t)
    acc = acc_of(rows)
    assert acc.counts.sum() == t
    assert abs(acc.P.sum() - 1) <= 1e-12
    assert abs(load_balance_loss(acc).item() - brute_aux(rows.tolist(), ALPHA)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_alpha_is_minimum_when_f_equals_p(n, seed):
    f = np.random.default_rng(seed).dirichlet(np.ones(n))
    assert ALPHA * n * float(f @ f) >= ALPHA - 1e-15


def test_gradient_only_through_p(rng):
    probs = nx.parameter(rng.dirichlet(np.ones(3), size=5))
    acc = AuxLossAccumulator(3, ALPHA)
    with nx.Tape() as tape:
        acc.add(probs)
        loss = load_balance_loss(acc)
    tape.backward(loss)
    expected = np.tile(ALPHA * 3 * acc.f / 5, (5, 1))
    assert np.allclose(probs.grad, expected, atol=1e-18)


def test_merge_concatenates_in_order(rng):
    a, b = rng.dirichlet(np.ones(3), size=4), rng.dirichlet(np.ones(3), size=3)
    acc = acc_of(a)
    acc.merge(acc_of(b))
    both = acc_of(np.concatenate([a, b]))
    assert acc.counts.tolist() == both.counts.tolist()
    assert load_balance_loss(acc).item() == load_balance_loss(both).item()


class _Result:
    def __init__(self, losses):
        self._l = losses

    def aux_losses(self):
        return self._l


def test_total_aux_loss():
    assert total_aux_loss(_Result([])).item() == 0.0
    uniform = acc_of(np.full((4, 2), 0.5))
    uniform.counts[:] = 2
    two = total_aux_loss(_Result([load_balance_loss(uniform), load_balance_loss(uniform)]))
    assert two.item() == 2 * ALPHA
