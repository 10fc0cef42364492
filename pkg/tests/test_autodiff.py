import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ieslab import autodiff as ad
from ieslab import models
from helpers import central_difference, max_relative_error, mean_loss_forward_only, random_mlp_problem


def T(x, grad=False):
    return ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def test_matmul_identity_and_hand_product():
    m = T([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(T(np.eye(2)), m).data, m.data)
    assert np.array_equal(ad.matmul(T([[1.0, 2.0]]), T([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_gradient_against_finite_difference():
    A, B = np.array([[1.0, 1.0]]), np.array([[2.0], [5.0]])
    tape = ad.Tape()
    a = T(A, grad=True)
    (g,) = ad.backward(tape, ad.total(ad.matmul(a, T(B), tape), tape), [a])
    numeric = central_difference(lambda arrs: float((arrs[0] @ B).sum()), [A.copy()], step=1e-6)[0]
    assert np.allclose(g, numeric, rtol=1e-8)
    assert np.allclose(g, [[2.0, 5.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ad.DimensionError):
        ad.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_relu_forward_and_subgradient():
    assert np.array_equal(ad.relu(T([[-1.0, 0.0, 2.0]])).data, [[0.0, 0.0, 2.0]])
    tape = ad.Tape()
    x = T([[-1.0, 2.0]], grad=True)
    (g,) = ad.backward(tape, ad.total(ad.relu(x, tape), tape), [x])
    numeric = central_difference(lambda arrs: float(np.maximum(arrs[0], 0).sum()), [x.data.copy()])[0]
    assert np.array_equal(g, [[0.0, 1.0]]) and np.allclose(g, numeric)
    pos = T([[0.1, 3.0]])
    assert np.array_equal(ad.relu(pos).data, pos.data)
    tape = ad.Tape()
    z = T([[0.0]], grad=True)
    (g0,) = ad.backward(tape, ad.total(ad.relu(z, tape), tape), [z])
    assert g0[0, 0] == 0.0


def test_cross_entropy_values():
    c = 7
    uniform = ad.softmax_cross_entropy(T(np.zeros((1, c))), [3]).data[0]
    assert uniform == pytest.approx(math.log(c), abs=1e-12)
    big = ad.softmax_cross_entropy(T([[1000.0, 0.0]]), [0]).data[0]
    assert np.isfinite(big) and big == pytest.approx(0.0, abs=1e-12)
    # closed form log(1 + e^(z_other - z_label))
    v = ad.softmax_cross_entropy(T([[1.0, 2.0]]), [1]).data[0]
    assert v == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-14)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    tape = ad.Tape()
    z = T([[1.0, 2.0, 0.5]], grad=True)
    (g,) = ad.backward(tape, ad.total(ad.softmax_cross_entropy(z, [2], tape), tape), [z])
    e = np.exp([1.0, 2.0, 0.5])
    expect = e / e.sum()
    expect[2] -= 1
    assert np.allclose(g[0], expect, atol=1e-15)


def test_cross_entropy_bad_label():
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(T(np.zeros((2, 3))), [0, 3])
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(T(np.zeros((1, 3))), [-1])


def test_backward_scalar_examples():
    tape = ad.Tape()
    w = T([1.5], grad=True)
    (g,) = ad.backward(tape, ad.total(w, tape), [w])
    assert np.array_equal(g, [1.0])
    tape = ad.Tape()
    w = T([3.0, 4.0], grad=True)
    half_sq = ad.scale(ad.total(ad.mul(w, w, tape), tape), 0.5, tape)
    (g,) = ad.backward(tape, half_sq, [w])
    assert np.array_equal(g, [3.0, 4.0])


def test_backward_state_errors():
    with pytest.raises(ad.TapeStateError):
        ad.backward(ad.Tape(), T(1.0), [])
    tape = ad.Tape()
    w = T([1.0], grad=True)
    loss = ad.total(w, tape)
    ad.backward(tape, loss, [w])
    with pytest.raises(ad.TapeStateError):
        ad.backward(tape, loss, [w])
    with pytest.raises(ad.TapeStateError):
        ad.total(w, tape)
    tape = ad.Tape()
    w2 = T([1.0, 2.0], grad=True)
    v = ad.mul(w2, w2, tape)
    with pytest.raises(ad.DimensionError):
        ad.backward(tape, ad.add(v, v, tape), [w2])


def test_unreached_tensor_gets_zero_gradient():
    tape = ad.Tape()
    a, b = T([1.0, 2.0], grad=True), T([5.0], grad=True)
    _, gb = ad.backward(tape, ad.total(a, tape), [a, b])
    assert np.array_equal(gb, [0.0])


def test_nonfinite_forward_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.relu(T([[np.nan]]))
    with np.errstate(over="ignore"), pytest.raises(ad.NonFiniteError):
        ad.scale(T([1e308]), 10.0)


def test_gradient_accumulates_over_fanout():
    tape = ad.Tape()
    x = T([2.0], grad=True)
    y = ad.add(ad.mul(x, x, tape), ad.scale(x, 3.0, tape), tape)
    (g,) = ad.backward(tape, ad.total(y, tape), [x])
    assert g[0] == pytest.approx(2 * 2.0 + 3.0)


@pytest.mark.parametrize("seed", range(5))
def test_mlp_gradient_matches_central_difference(seed):
    rng = np.random.default_rng(seed)
    params, x, y = random_mlp_problem(rng)
    _, grads = models.loss_and_grads(params, x, y)
    numeric = central_difference(mean_loss_forward_only(x, y), params.copy().arrays())
    assert max_relative_error(grads, numeric) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_batch_gradient_is_mean_of_per_sample_gradients(seed):
    rng = np.random.default_rng(seed)
    params, x, y = random_mlp_problem(rng, batch=4)
    _, batch_g = models.loss_and_grads(params, x, y)
    per = [models.loss_and_grads(params, x[i:i + 1], y[i:i + 1])[1] for i in range(4)]
    for j, g in enumerate(batch_g):
        assert np.allclose(g, np.mean([p[j] for p in per], axis=0), rtol=1e-10, atol=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_backward_is_deterministic(seed):
    rng = np.random.default_rng(seed)
    params, x, y = random_mlp_problem(rng)
    a = models.loss_and_grads(params, x, y)[1]
    b = models.loss_and_grads(params, x, y)[1]
    assert all(np.array_equal(p, q) for p, q in zip(a, b))
