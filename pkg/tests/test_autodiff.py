import numpy as np
import pytest

from model.autodiff import (
    Tensor, as_tensor, concat, cross_entropy, getitem, grad_check, l2_distance, log_softmax, logsumexp, matmul,
    no_grad, parameter, softmax, stack, tsum, where, is_grad_enabled, zero_grads,
)
from model.layers import FeedForward, MultiHeadAttention, TransformerStack
from utils.error_handler import DimensionError, NumericError


def _rng():
    return np.random.default_rng(11)


def test_add_mul_backward_with_broadcast():
    a = parameter(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = parameter(np.array([10.0, 20.0]))
    loss = tsum(a * b + a)
    loss.backward()
    assert np.allclose(a.grad, [[11.0, 21.0], [11.0, 21.0]])
    assert np.allclose(b.grad, [4.0, 6.0])


def test_gradients_accumulate_until_zeroed():
    w = parameter(np.array([2.0]))
    tsum(w * 3.0).backward()
    tsum(w * 3.0).backward()
    assert np.allclose(w.grad, [6.0])
    w.zero_grad()
    assert w.grad is None


def test_zero_grads_clears_every_tensor():
    a = parameter(np.ones(2))
    b = parameter(np.ones(3))
    tsum(a * 2.0).backward()
    tsum(b * 4.0).backward()
    zero_grads([a, b])
    assert a.grad is None and b.grad is None
    ff = FeedForward(4, 8, 3, _rng())
    tsum(ff(as_tensor(np.ones((2, 4))))).backward()
    assert any(p.grad is not None for p in ff.parameters())
    ff.zero_grad()
    assert all(p.grad is None for p in ff.parameters())


def test_no_grad_records_nothing():
    w = parameter(np.ones(3))
    with no_grad():
        assert not is_grad_enabled()
        out = tsum(w * 2.0)
    assert is_grad_enabled()
    assert not out.requires_grad
    out.backward()
    assert w.grad is None


def test_constant_loss_backward_is_noop():
    out = tsum(as_tensor(np.ones(4)))
    out.backward()
    assert out.grad is None


def test_backward_needs_scalar():
    w = parameter(np.ones(3))
    with pytest.raises(NumericError):
        (w * 2.0).backward()


def test_where_blocks_masked_gradient():
    x = parameter(np.array([1.0, 2.0, 3.0]))
    mask = np.array([True, False, True])
    out = where(mask, x, -np.inf)
    assert np.isneginf(out.data[1])
    tsum(log_softmax(out)[np.array([0])]).backward()
    assert x.grad[1] == 0.0


def test_log_softmax_of_all_masked_row_is_minus_inf():
    x = as_tensor(np.full(4, -np.inf))
    assert np.all(np.isneginf(log_softmax(x).data))
    assert np.all(softmax(x).data == 0.0)
    assert np.isneginf(logsumexp(x).data)


def test_logsumexp_ignores_minus_inf_entries():
    x = parameter(np.array([0.0, -np.inf, np.log(3.0)]))
    out = logsumexp(x)
    assert np.isclose(out.data, np.log(4.0))
    out.backward()
    assert np.allclose(x.grad, [0.25, 0.0, 0.75])


def test_dimension_checks():
    with pytest.raises(DimensionError):
        where(np.array([True]), as_tensor(np.ones(2)), 0.0)
    with pytest.raises(DimensionError):
        as_tensor(np.ones(3)) + as_tensor(np.ones(4))


def test_grad_check_elementwise_and_reductions():
    rng = _rng()
    x = parameter(rng.normal(size=(3, 4)))
    y = parameter(rng.normal(size=(4, 2)))

    def f():
        h = matmul(x, y)
        return tsum(log_softmax(h, axis=-1) * np.array([1.0, 0.5])) + tsum(logsumexp(concat([h, h * 2.0], axis=0)))

    report = grad_check(f, {"x": x, "y": y})
    assert report.passed, report.per_tensor


def test_grad_check_l2_distance_and_stack():
    rng = _rng()
    u = parameter(rng.normal(size=(3, 1, 5)))
    v = parameter(rng.normal(size=(1, 4, 5)))

    def f():
        dist = l2_distance(u, v, axis=-1)
        rows = stack([getitem(dist, 0), getitem(dist, 2)], axis=0)
        return tsum(logsumexp(-rows, axis=-1))

    assert grad_check(f, {"u": u, "v": v}).passed


def test_cross_entropy_value_and_gradient():
    logits = parameter(np.array([1.0, 2.0, 3.0]))
    loss = cross_entropy(logits, 2)
    assert float(loss.data) == pytest.approx(np.log(1.0 + np.exp(-1.0) + np.exp(-2.0)))
    loss.backward()
    probs = np.exp([1.0, 2.0, 3.0]) / np.exp([1.0, 2.0, 3.0]).sum()
    assert np.allclose(logits.grad, probs - np.array([0.0, 0.0, 1.0]))


def test_grad_check_cross_entropy():
    rng = _rng()
    x = parameter(rng.normal(size=(1, 4)))
    w = parameter(rng.normal(size=(4, 5)))

    def f():
        logits = getitem(matmul(x, w), 0)
        return cross_entropy(logits, 3) + cross_entropy(logits * 0.5, 0)

    report = grad_check(f, {"x": x, "w": w})
    assert report.passed, report.per_tensor


def test_grad_check_attention_and_transformer():
    rng = _rng()
    attention = MultiHeadAttention(8, 2, rng)
    stack_ = TransformerStack(1, 8, 2, 16, rng)
    queries = parameter(rng.normal(size=(3, 8)))
    keys = as_tensor(rng.normal(size=(5, 8)))

    def f():
        attended = attention(queries, keys)
        read = stack_.readout([attended, attended * 0.5])
        return tsum(read * read)

    params = {"queries": queries}
    params.update(attention.named_parameters("attention."))
    params.update(stack_.named_parameters("stack."))
    report = grad_check(f, params, samples=8)
    assert report.passed, report.per_tensor


def test_feedforward_shapes():
    ff = FeedForward(6, 12, 4, _rng())
    out = ff(as_tensor(np.ones((2, 6))))
    assert out.shape == (2, 4)
    with pytest.raises(DimensionError):
        ff(as_tensor(np.ones((2, 5))))


def test_attention_rejects_indivisible_heads():
    with pytest.raises(DimensionError):
        MultiHeadAttention(10, 3, _rng())


def test_detach_cuts_the_graph():
    w = parameter(np.ones(2))
    d = (w * 3.0).detach()
    assert isinstance(d, Tensor) and not d.requires_grad
    tsum(d * w).backward()
    assert np.allclose(w.grad, [3.0, 3.0])
