import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from frnas.autodiff import (
    BadRate,
    BatchNormState,
    DegenerateBatch,
    EmptyInput,
    NonScalarLoss,
    ShapeMismatch,
    Tape,
    Tensor,
    backward,
    batch_norm,
    dropout,
    gin_aggregate,
    grad_check,
    linear,
    matmul,
    mean_all,
    mse,
    relu,
    reshape,
    row_mean,
    sum_all,
)


def test_matmul_examples():
    b = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), b).data, b.data)
    np.testing.assert_array_equal(matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])
    with pytest.raises(ShapeMismatch):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_relu_values_and_subgradient():
    x = Tensor([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(relu(x).data, [0, 0, 2])
    np.testing.assert_array_equal(relu(relu(x)).data, relu(x).data)
    x = Tensor([-1.0, 2.0, 0.0], requires_grad=True)
    with Tape() as t:
        loss = sum_all(relu(x))
    backward(loss, t)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_row_mean_examples():
    np.testing.assert_array_equal(row_mean(Tensor([[2.0, 4.0]])).data, [2, 4])
    np.testing.assert_array_equal(row_mean(Tensor([[0.0, 0.0], [2.0, 4.0]])).data, [1, 2])
    x = Tensor(np.ones((4, 3)), requires_grad=True)
    with Tape() as t:
        loss = sum_all(row_mean(x))
    backward(loss, t)
    np.testing.assert_allclose(x.grad, 0.25)
    with pytest.raises(EmptyInput):
        row_mean(Tensor(np.zeros((0, 3))))


def test_batch_norm_train_and_eval():
    st_ = BatchNormState.create(1)
    y = batch_norm(Tensor([[1.0], [3.0]]), st_, train=True)
    assert abs(y.data.mean()) < 1e-12
    assert abs(y.data.var() - 1.0) < 1e-4
    x = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_allclose(batch_norm(Tensor(x), BatchNormState.create(3), train=False).data,
                               x / np.sqrt(1 + 1e-5))
    with pytest.raises(DegenerateBatch):
        batch_norm(Tensor([[1.0]]), BatchNormState.create(1), train=True)


def test_batch_norm_gradient():
    rng = np.random.default_rng(1)
    state = BatchNormState.create(3)
    state.gamma.data[:] = rng.normal(size=3)
    x = Tensor(rng.normal(size=(4, 3)))
    w = rng.normal(size=(4, 3))
    err = grad_check(lambda x_, g, b: sum_all(Tensor(w) * batch_norm(x_, state, True)),
                     [x, state.gamma, state.beta])
    assert err < 1e-4


def test_dropout():
    x = Tensor(np.arange(1.0, 7.0))
    rng = np.random.default_rng(0)
    assert dropout(x, 0.0, True, rng) is x
    assert dropout(x, 0.5, False, rng) is x
    with pytest.raises(BadRate):
        dropout(x, 1.0, True, rng)
    draws = np.stack([dropout(x, 0.3, True, rng).data for _ in range(4000)])
    sem = draws.std(axis=0) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - x.data) < 3 * sem + 1e-12)


def test_backward_basics():
    x = Tensor(np.arange(4.0), requires_grad=True)
    with Tape() as t:
        loss = sum_all(x)
    backward(loss, t)
    np.testing.assert_array_equal(x.grad, np.ones(4))
    x = Tensor(np.arange(4.0), requires_grad=True)
    with Tape() as t:
        loss = mse(x, x.data)
    backward(loss, t)
    np.testing.assert_array_equal(x.grad, np.zeros(4))
    with pytest.raises(NonScalarLoss):
        with Tape() as t:
            out = relu(Tensor(np.ones(3), requires_grad=True))
        backward(out, t)


def test_unreached_leaf_keeps_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    with Tape() as t:
        loss = sum_all(x)
    backward(loss, t)
    assert unused.grad is None or not unused.grad.any()


def test_grad_check_closed_forms():
    x = Tensor([1.0, 2.0])
    assert grad_check(lambda t: sum_all(t * t), x) < 1e-6
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    w = Tensor([[3.0], [-1.0]])
    assert grad_check(lambda t: sum_all(matmul(Tensor([[1.0, 2.0]]), t)), w) < 1e-9


def test_matmul_gradient():
    rng = np.random.default_rng(2)
    a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2)))
    assert grad_check(lambda a_, b_: sum_all(matmul(a_, b_)), [a, b]) < 1e-4


def test_gin_shaped_composite_gradient():
    rng = np.random.default_rng(3)
    adj = np.triu(rng.random((5, 5)) < 0.5, 1).astype(float)
    h = Tensor(rng.normal(size=(5, 3)))
    w1, b1 = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=4))
    state = BatchNormState.create(4)
    # pooling a BN output over the rows it normalised would give beta, so read out with weights
    readout = Tensor(rng.normal(size=(5, 4)))

    def f(h_, w, b):
        z = relu(linear(gin_aggregate(h_, adj), w, b))
        return mean_all(batch_norm(z, state, True) * readout)

    assert grad_check(f, [h, w1, b1]) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 10_000))
def test_smooth_composite_gradients_random_shapes(m, d, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(m, d)))
    w = Tensor(rng.normal(size=(d, 3)))
    b = Tensor(rng.normal(size=3))
    v = Tensor(rng.normal(size=(3, 1)))
    y = rng.normal(size=m)
    f = lambda x_, w_, b_: mse(reshape(matmul(linear(x_, w_, b_), v), (m,)), y)
    assert grad_check(f, [x, w, b]) < 1e-4


def test_tape_replay_is_deterministic():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(6, 3))
    outs = []
    for _ in range(2):
        r = np.random.default_rng(9)
        with Tape():
            outs.append(dropout(relu(Tensor(x, requires_grad=True)), 0.2, True, r).data)
    np.testing.assert_array_equal(outs[0], outs[1])
