import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mmtransformer import numerics as nx
from mmtransformer.errors import ContractError, DegenerateMaskError, InvalidValueError, ShapeError, TrainingDivergenceError
from mmtransformer.training import huber

from oracles import FD_TOL, naive_matmul, run_gradient_suite

D = torch.float64


def t(x):
    return torch.tensor(x, dtype=D)


# softmax


def test_softmax_uniform_for_equal_logits():
    assert torch.allclose(nx.softmax(t([0.0, 0.0, 0.0])), t([1 / 3] * 3), atol=1e-15)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_shift_invariant(xs, c):
    x = t(xs)
    assert torch.allclose(nx.softmax(x + c), nx.softmax(x), atol=1e-12)


def test_softmax_two_logits_matches_hand_value():
    # 1 / (1 + e) and e / (1 + e)
    assert torch.allclose(nx.softmax(t([1.0, 2.0])), t([0.2689414213699951, 0.7310585786300049]), atol=1e-12)


def test_softmax_rejects_nan():
    with pytest.raises(InvalidValueError):
        nx.softmax(t([0.0, float("nan")]))


def test_masked_softmax_zeroes_masked_and_rejects_empty_rows():
    w = nx.masked_softmax(t([[1.0, 5.0, 2.0]]), torch.tensor([[True, False, True]]))
    assert w[0, 1] == 0
    assert torch.allclose(w.sum(-1), t([1.0]))
    with pytest.raises(DegenerateMaskError):
        nx.masked_softmax(t([[1.0, 2.0]]), torch.tensor([[False, False]]))


# attention


def test_attention_single_key_returns_value():
    q = torch.randn(3, 4, dtype=D)
    k = torch.randn(1, 4, dtype=D)
    v = torch.randn(1, 4, dtype=D)
    out = nx.multi_head_attention(q, k, v, heads=2)
    assert torch.allclose(out, v.expand(3, 4), atol=1e-14)


def test_attention_identical_keys_give_uniform_weights_over_valid():
    q = torch.randn(2, 4, dtype=D)
    k = torch.ones(5, 4, dtype=D)
    mask = torch.tensor([True, True, False, True, False])
    _, w = nx.multi_head_attention(q, k, torch.randn(5, 4, dtype=D), mask, heads=2, return_weights=True)
    expected = mask.to(D) / 3
    assert torch.allclose(w, expected.expand_as(w), atol=1e-14)


def test_attention_two_by_two_hand_case():
    q = t([[1.0, 0.0], [0.0, 1.0]])
    k = t([[1.0, 0.0], [1.0, 1.0]])
    v = t([[1.0, 2.0], [3.0, 4.0]])
    out, w = nx.multi_head_attention(q, k, v, heads=1, return_weights=True)
    # query 0 scores both keys 1/sqrt(2); query 1 scores 0 and 1/sqrt(2)
    w1 = 1 / (1 + math.exp(1 / math.sqrt(2)))
    assert torch.allclose(w[0], t([[0.5, 0.5], [w1, 1 - w1]]), atol=1e-12)
    assert torch.allclose(out, t([[2.0, 3.0], [2.3395230986533138, 3.3395230986533138]]), atol=1e-12)


def test_attention_shape_errors():
    with pytest.raises(ShapeError):
        nx.multi_head_attention(torch.zeros(2, 3), torch.zeros(2, 3), torch.zeros(2, 3), heads=2)
    with pytest.raises(ShapeError):
        nx.multi_head_attention(torch.zeros(2, 4), torch.zeros(3, 4), torch.zeros(2, 4))


def test_attention_fully_masked_row_raises():
    with pytest.raises(DegenerateMaskError):
        nx.multi_head_attention(torch.zeros(1, 2), torch.zeros(2, 2), torch.zeros(2, 2), torch.tensor([False, False]))


# mlp / linear


def test_mlp_identity():
    x = torch.randn(4, 3, dtype=D)
    assert torch.equal(nx.mlp_block(x, [(torch.eye(3, dtype=D), torch.zeros(3, dtype=D), None)]), x)


def test_mlp_relu_on_negative_preactivations_is_zero():
    x = -torch.rand(4, 3, dtype=D) - 0.1
    assert torch.count_nonzero(nx.mlp_block(x, [(torch.eye(3, dtype=D), None, "relu")])) == 0


def test_linear_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, w, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
    expected = naive_matmul(a, w) + b
    assert np.allclose(nx.linear(t(a), t(w), t(b)).numpy(), expected, atol=1e-12)
    assert np.allclose(nx.mlp_block(t(a), [(t(w), t(b), None)]).numpy(), expected, atol=1e-12)


def test_mlp_shape_mismatch():
    with pytest.raises(ShapeError):
        nx.mlp_block(torch.zeros(2, 3), [(torch.zeros(4, 2), None, None)])


# layer norm


def test_layer_norm_constant_row_is_zero():
    out = nx.layer_norm(t([[1.0, 1.0, 1.0]]), torch.ones(3, dtype=D), torch.zeros(3, dtype=D))
    assert torch.equal(out, torch.zeros(1, 3, dtype=D))


def test_layer_norm_already_normalized_row():
    out = nx.layer_norm(t([-1.0, 1.0]), torch.ones(2, dtype=D), torch.zeros(2, dtype=D))
    assert torch.allclose(out, t([-1.0, 1.0]), atol=1e-10)


def test_layer_norm_statistics():
    x = np.random.default_rng(0).standard_normal(17) * 4 + 3
    out = nx.layer_norm(t(x), torch.ones(17, dtype=D), torch.zeros(17, dtype=D)).numpy()
    assert abs(sum(out) / 17) < 1e-12
    assert abs(sum(v * v for v in out) / 17 - 1) < 1e-9


# gradients


def test_gradient_of_sum_is_ones():
    x = torch.randn(5, dtype=D, requires_grad=True)
    (g,) = nx.compute_gradients(x.sum(), [x])
    assert torch.equal(g, torch.ones(5, dtype=D))


def test_huber_gradient_vanishes_at_target():
    pred = torch.zeros(4, dtype=D, requires_grad=True)
    (g,) = nx.compute_gradients(huber(pred - 0.0).sum(), [pred])
    assert torch.equal(g, torch.zeros(4, dtype=D))


def test_gradients_of_non_scalar_rejected():
    x = torch.randn(3, requires_grad=True)
    with pytest.raises(ContractError):
        nx.compute_gradients(x * 2, [x])


def test_unused_parameter_gets_zero_gradient():
    x = torch.randn(3, requires_grad=True)
    y = torch.randn(2, requires_grad=True)
    gx, gy = nx.compute_gradients((x * x).sum(), [x, y])
    assert torch.equal(gy, torch.zeros(2))


def test_finite_difference_suite():
    result = run_gradient_suite(seed=1)
    assert result.instances >= 100
    for name, errs in result.errors.items():
        assert max(errs) < FD_TOL, name


# optimizer


def test_clipping_scales_gradients():
    p = [torch.zeros(2, dtype=D)]
    g = [t([6.0, 8.0])]  # norm 10
    state = nx.OptimizerState(lr=1.0, weight_decay=0.0, max_norm=0.1)
    norm = nx.optimizer_step(p, g, state)
    assert norm == pytest.approx(10.0)
    # the first Adam moments see g * 0.01
    assert torch.allclose(state.exp_avg[0], 0.1 * t([0.06, 0.08]), atol=1e-15)


def test_zero_gradients_and_zero_decay_leave_parameters():
    p = [torch.randn(3, dtype=D)]
    before = p[0].clone()
    nx.optimizer_step(p, [torch.zeros(3, dtype=D)], nx.OptimizerState(weight_decay=0.0))
    assert torch.equal(p[0], before)


def test_single_step_matches_hand_oracle():
    # p=1, g=0.5, lr=0.1, wd=0.01, default betas and eps, no clipping:
    # p <- p(1 - lr wd) - lr * m_hat / (sqrt(v_hat) + eps) with m_hat = g, v_hat = g^2
    p = [t([1.0])]
    nx.optimizer_step(p, [t([0.5])], nx.OptimizerState(lr=0.1, weight_decay=0.01, max_norm=None))
    assert p[0].item() == pytest.approx(0.899000002, abs=1e-12)


def test_non_finite_gradient_diverges():
    with pytest.raises(TrainingDivergenceError):
        nx.optimizer_step([torch.zeros(1)], [torch.tensor([float("inf")])], nx.OptimizerState())


def test_optimizer_shape_mismatch():
    with pytest.raises(ShapeError):
        nx.optimizer_step([torch.zeros(2)], [torch.zeros(3)], nx.OptimizerState())


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6), st.floats(1e-3, 10.0))
def test_clipped_update_never_exceeds_adam_bound(gs, max_norm):
    # with bias correction the first step moves each coordinate by at most lr
    p = [torch.zeros(len(gs), dtype=D)]
    state = nx.OptimizerState(lr=0.01, weight_decay=0.0, max_norm=max_norm)
    nx.optimizer_step(p, [t(gs)], state)
    assert float(p[0].abs().max()) <= 0.01 + 1e-12
