"""MoE model against dense/brute-force oracles and gradient checks."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moelab import rng
from moelab import tensor as T
from moelab.errors import ConfigurationError, InputError
from moelab.model import (
    ModelConfig, MoeLM, RouterOutput, expert_mlp, init_params, load_balance_loss,
    moe_forward, param_shapes, route, router_z_loss, top_k_indices,
)

TINY = ModelConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=24, seq_len=12,
                   n_experts=4, top_k=2, expert_hidden=8)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(top_k=9, n_experts=8)
    with pytest.raises(ConfigurationError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ConfigurationError):
        ModelConfig(n_layers=0)


# --- routing ---


def test_route_descending_logits():
    hidden = T.Tensor(np.eye(4)[:1])  # picks first row of router weights
    w = T.Tensor(np.array([[2.0, 1.0, 0.0, -1.0]] + [[0.0] * 4] * 3))
    out = route(hidden, w, k=2)
    soft = np.exp([2.0, 1.0, 0.0, -1.0])
    soft /= soft.sum()
    np.testing.assert_array_equal(out.topk_indices, [[0, 1]])
    np.testing.assert_allclose(out.gate_weights.data, [soft[:2]], atol=1e-14)
    np.testing.assert_allclose(out.probs.data, [soft], atol=1e-14)


def test_route_tie_break_lowest_index():
    hidden = T.Tensor(np.zeros((3, 4)))
    w = T.Tensor(np.zeros((4, 4)))
    out = route(hidden, w, k=2)
    np.testing.assert_allclose(out.probs.data, np.full((3, 4), 0.25), atol=1e-15)
    np.testing.assert_array_equal(out.topk_indices, [[0, 1]] * 3)


def test_route_k_equals_e_degenerate():
    gen = rng.stream(1, "route-ke")
    hidden = T.Tensor(gen.normal(size=(5, 6)))
    w = T.Tensor(gen.normal(size=(6, 3)))
    out = route(hidden, w, k=3)
    gathered = np.take_along_axis(out.probs.data, out.topk_indices, axis=1)
    np.testing.assert_allclose(np.sort(out.gate_weights.data, axis=1),
                               np.sort(out.probs.data, axis=1), atol=1e-15)
    np.testing.assert_allclose(out.gate_weights.data, gathered, atol=1e-15)


def test_route_rejects_k_above_e():
    with pytest.raises(ConfigurationError):
        route(T.Tensor(np.zeros((1, 4))), T.Tensor(np.zeros((4, 2))), k=3)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=60, deadline=None)
def test_topk_matches_sort_oracle(seed):
    gen = rng.stream(seed, "topk-oracle")
    e = int(gen.integers(2, 9))
    k = int(gen.integers(1, e + 1))
    probs = gen.dirichlet(np.ones(e), size=7)
    if gen.random() < 0.3:  # force ties
        probs[:, : e // 2 + 1] = probs[:, : e // 2 + 1].mean(axis=1, keepdims=True)
    got = top_k_indices(probs, k)
    for row in range(probs.shape[0]):
        order = sorted(range(e), key=lambda j: (-probs[row, j], j))
        assert list(got[row]) == order[:k]


def test_gate_weights_equal_probs_at_topk():
    gen = rng.stream(9, "gates")
    hidden = T.Tensor(gen.normal(size=(11, 8)))
    w = T.Tensor(gen.normal(size=(8, 5)))
    out = route(hidden, w, k=2)
    expect = np.take_along_axis(out.probs.data, out.topk_indices, axis=1)
    np.testing.assert_allclose(out.gate_weights.data, expect, atol=1e-15)


def test_renormalized_gates_sum_to_one():
    gen = rng.stream(10, "gates-renorm")
    hidden = T.Tensor(gen.normal(size=(6, 8)))
    w = T.Tensor(gen.normal(size=(8, 5)))
    out = route(hidden, w, k=3, renormalize=True)
    np.testing.assert_allclose(out.gate_weights.data.sum(axis=1), np.ones(6), atol=1e-12)


# --- moe_forward ---


def _dense_masking_oracle(hidden, weights, router_out):
    """Evaluate every expert densely, zero out non-selected gates, combine."""
    n, _ = hidden.shape
    e = router_out.probs.data.shape[1]
    mask = np.zeros((n, e))
    np.put_along_axis(mask, router_out.topk_indices, 1.0, axis=1)
    gates = np.zeros((n, e))
    np.put_along_axis(gates, router_out.topk_indices, router_out.gate_weights.data, axis=1)
    out = np.zeros_like(hidden)
    for j in range(e):
        y = expert_mlp(T.Tensor(hidden), *[T.Tensor(w.data) for w in weights[j]]).data
        out += (gates[:, j] * mask[:, j])[:, None] * y
    return out


def test_moe_forward_single_identity_expert():
    d = 4
    hidden = T.Tensor(rng.stream(2, "moe-id").normal(size=(5, d)))
    # identity expert: silu(x*large)*x/large... instead use linear passthrough:
    # w_gate huge -> silu ~ identity on positives; simpler to check with k=1, E=1
    # and an expert computing x @ I via w_up=I, w_gate s.t. silu(x@w_gate)=1.
    # Easiest honest check: gate weight scales a constant expert.
    w_gate = T.Tensor(np.zeros((d, 1)))  # silu(0)=0 -> y=0; so use direct weights below
    probs = T.Tensor(np.ones((5, 1)))
    ro = RouterOutput(probs=probs, topk_indices=np.zeros((5, 1), dtype=int),
                      gate_weights=T.Tensor(np.full((5, 1), 0.7)), logits=probs)
    # expert that returns exactly x: w_up = 2*silu(1)^-1 trick is contrived; use
    # w_gate -> large positive so silu(x@w_gate) ~= x@w_gate when scalar hidden=1.
    # Instead verify through the dense oracle equivalence on arbitrary weights:
    gen = rng.stream(2, "moe-id-w")
    weights = [(T.parameter(gen.normal(size=(d, 3))), T.parameter(gen.normal(size=(d, 3))),
                T.parameter(gen.normal(size=(3, d))))]
    out, _ = moe_forward(hidden, weights, ro, layer=0)
    y = expert_mlp(hidden, *weights[0]).data
    np.testing.assert_allclose(out.data, 0.7 * y, atol=1e-13)


def test_moe_forward_two_constant_experts_weighted_sum():
    # both experts selected (k=2 of 2) with gates 0.6/0.4 on every token
    n, d = 4, 3
    hidden = T.Tensor(np.zeros((n, d)))
    gates = T.Tensor(np.tile([0.6, 0.4], (n, 1)))
    ro = RouterOutput(probs=T.Tensor(np.tile([0.6, 0.4], (n, 1))),
                      topk_indices=np.tile([0, 1], (n, 1)), gate_weights=gates,
                      logits=T.Tensor(np.zeros((n, 2))))
    # zero hidden -> silu(0)*0 = 0 for any weights; constant experts need biases the
    # MLP does not have, so emulate constants by checking the combination weights on
    # expert outputs directly through the dense oracle instead.
    gen = rng.stream(3, "moe-const")
    weights = [
        (T.parameter(gen.normal(size=(d, 2))), T.parameter(gen.normal(size=(d, 2))),
         T.parameter(gen.normal(size=(2, d)))) for _ in range(2)
    ]
    hidden = T.Tensor(gen.normal(size=(n, d)))
    out, _ = moe_forward(hidden, weights, ro, layer=0)
    y0 = expert_mlp(hidden, *weights[0]).data
    y1 = expert_mlp(hidden, *weights[1]).data
    np.testing.assert_allclose(out.data, 0.6 * y0 + 0.4 * y1, atol=1e-13)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25, deadline=None)
def test_moe_forward_matches_dense_masking_oracle(seed):
    gen = rng.stream(seed, "moe-dense-oracle")
    n, d, e, h = 9, 6, 5, 4
    k = int(gen.integers(1, e + 1))
    hidden = T.Tensor(gen.normal(size=(n, d)))
    router_w = T.Tensor(gen.normal(size=(d, e)))
    weights = [
        (T.parameter(gen.normal(size=(d, h))), T.parameter(gen.normal(size=(d, h))),
         T.parameter(gen.normal(size=(h, d))))
        for _ in range(e)
    ]
    ro = route(hidden, router_w, k)
    out, _ = moe_forward(hidden, weights, ro, layer=0)
    expect = _dense_masking_oracle(hidden.data, weights, ro)
    np.testing.assert_allclose(out.data, expect, atol=1e-12, rtol=0)


# --- auxiliary losses ---


def test_load_balance_uniform_is_one():
    e, n = 8, 64
    probs = np.full((n, e), 1.0 / e)
    topk = np.arange(n * 2).reshape(n, 2) % e  # perfectly balanced assignment
    val = float(load_balance_loss(probs, topk).data)
    assert abs(val - 1.0) < 1e-12


def test_load_balance_collapsed_is_e():
    e, n = 6, 10
    probs = np.zeros((n, e))
    probs[:, 2] = 1.0
    topk = np.full((n, 1), 2)
    val = float(load_balance_loss(probs, topk).data)
    assert abs(val - e) < 1e-12


def _brute_force_balance(probs, topk):
    n, e = probs.shape
    k = topk.shape[1]
    total = 0.0
    for expert in range(e):
        count = sum(1 for t in range(n) for j in range(k) if topk[t, j] == expert)
        f = count / (n * k)
        pbar = sum(probs[t, expert] for t in range(n)) / n
        total += f * pbar
    return e * total


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_load_balance_matches_brute_force_tally(seed):
    gen = rng.stream(seed, "lb-brute")
    n, e = int(gen.integers(2, 20)), int(gen.integers(2, 9))
    k = int(gen.integers(1, e + 1))
    probs = gen.dirichlet(np.ones(e), size=n)
    topk = top_k_indices(probs, k)
    got = float(load_balance_loss(probs, topk).data)
    assert abs(got - _brute_force_balance(probs, topk)) < 1e-10


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_load_balance_lower_bound_for_shared_routing(seed):
    # When every token routes by the same distribution, f picks the top-k mass
    # indicator and E * sum f*p >= 1 holds exactly. (Batch-mixed routing can dip
    # below 1 by O(1/n) sampling fluctuations, so the bound is asserted here in
    # the regime where it is a theorem.)
    gen = rng.stream(seed, "lb-bound")
    e = int(gen.integers(2, 12))
    k = int(gen.integers(1, e + 1))
    n = int(gen.integers(1, 30))
    p = gen.dirichlet(np.ones(e))
    probs = np.tile(p, (n, 1))
    topk = top_k_indices(probs, k)
    got = float(load_balance_loss(probs, topk).data)
    assert got >= 1.0 - 1e-12


def test_z_loss_all_zero_logits():
    val = float(router_z_loss(np.zeros((5, 4))).data)
    assert abs(val - math.log(4.0) ** 2) < 1e-12


def test_z_loss_zero_when_logsumexp_zero():
    row = np.array([0.5, -1.0, 0.3])
    shifted = row - math.log(np.exp(row).sum())
    val = float(router_z_loss(shifted[None, :]).data)
    assert abs(val) < 1e-24


def test_z_loss_matches_reference():
    gen = rng.stream(4, "z-ref")
    logits = gen.normal(size=(7, 5))
    expect = np.mean([math.log(np.exp(row).sum()) ** 2 for row in logits])
    val = float(router_z_loss(logits).data)
    assert abs(val - expect) < 1e-10


# --- full model ---


def test_forward_probs_rows_sum_to_one():
    model = MoeLM(TINY, seed=3)
    tokens = rng.stream(5, "fwd").integers(0, TINY.vocab_size, size=(3, 10))
    traces = model.trace_batch(tokens)
    for trace in traces:
        np.testing.assert_allclose(trace.probs.sum(axis=1), 1.0, atol=1e-9)


def test_lm_loss_components_isolate():
    cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=24, seq_len=12,
                      n_experts=4, top_k=2, expert_hidden=8,
                      aux_loss_weight=0.0, z_loss_weight=0.0)
    model = MoeLM(cfg, seed=3)
    batch = rng.stream(6, "loss").integers(0, cfg.vocab_size, size=(2, 9))
    total, parts, _ = model.lm_loss(batch)
    assert abs(float(total.data) - parts["ce"]) < 1e-15


def test_untrained_model_ce_near_log_v():
    model = MoeLM(TINY, seed=7)
    batch = rng.stream(8, "lnv").integers(0, TINY.vocab_size, size=(4, 11))
    _, parts, _ = model.lm_loss(batch)
    assert abs(parts["ce"] - math.log(TINY.vocab_size)) < 0.2  # reported, loose


def test_lm_loss_pinned_golden():
    """Frozen from the double-precision reference run of this configuration."""
    model = MoeLM(TINY, seed=1234)
    batch = rng.stream(1234, "golden-batch").integers(0, TINY.vocab_size, size=(2, 8))
    total, _, _ = model.lm_loss(batch)
    golden = float(np.load(__file__.replace("test_model.py", "data/lm_loss_golden.npy")))
    assert abs(float(total.data) - golden) < 1e-12


def test_oversized_sequence_rejected():
    model = MoeLM(TINY, seed=0)
    with pytest.raises(InputError):
        model.lm_loss(np.zeros((1, TINY.seq_len + 2), dtype=int))


def test_out_of_range_token_rejected():
    model = MoeLM(TINY, seed=0)
    bad = np.zeros((1, 5), dtype=int)
    bad[0, 2] = TINY.vocab_size
    with pytest.raises(InputError):
        model.lm_loss(bad)


def test_end_to_end_gradient_matches_finite_differences():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, vocab_size=12, seq_len=6,
                      n_experts=3, top_k=2, expert_hidden=4)
    model = MoeLM(cfg, seed=11)
    batch = rng.stream(11, "fd-batch").integers(0, cfg.vocab_size, size=(2, 6))
    err = T.finite_difference_check(lambda: model.lm_loss(batch)[0], model.params, h=1e-5)
    assert err < 1e-4, f"gradient check failed: {err}"


def test_forward_deterministic():
    model = MoeLM(TINY, seed=5)
    batch = rng.stream(5, "det-batch").integers(0, TINY.vocab_size, size=(2, 10))
    a, _, _ = model.lm_loss(batch)
    b, _, _ = model.lm_loss(batch)
    assert a.data.tobytes() == b.data.tobytes()


def test_param_shapes_cover_init():
    params = init_params(TINY, seed=0)
    shapes = param_shapes(TINY)
    assert set(params) == set(shapes)
    for name, p in params.items():
        assert tuple(p.data.shape) == tuple(shapes[name])
