import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emma import tensor as T
from emma.errors import ContractError
from emma.optim import adam, optimizer_step, sgd, zero_grad


def param(value, grad):
    p = T.Tensor(np.array([value]), requires_grad=True, dtype=np.float64)
    p.grad = np.array([grad])
    return p


def test_sgd_step():
    p = param(1.0, 2.0)
    optimizer_step({"p": p}, sgd(0.1))
    assert p.data[0] == pytest.approx(0.8)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3), st.floats(1e-4, 1e-1))
def test_adam_first_step_moves_by_lr(g, lr):
    p = param(0.0, g)
    optimizer_step({"p": p}, adam(lr))
    assert p.data[0] == pytest.approx(-lr * np.sign(g), abs=1e-6)


def test_adam_first_step_unit_gradient():
    p = param(1.0, 1.0)
    optimizer_step({"p": p}, adam(0.01))
    assert p.data[0] == pytest.approx(0.99, abs=1e-6)


@pytest.mark.parametrize("state", [sgd(0.5), adam(0.5)])
def test_zero_grad_leaves_param(state):
    p = param(3.0, 0.0)
    optimizer_step({"p": p}, state)
    assert p.data[0] == 3.0


def test_missing_grad_is_named():
    p = T.Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ContractError, match="weights"):
        optimizer_step({"weights": p}, sgd(0.1))


def test_zero_grad_clears():
    p = param(1.0, 1.0)
    zero_grad({"p": p})
    assert p.grad is None


def test_training_is_bit_reproducible():
    def run():
        rng = np.random.default_rng(7)
        w = T.Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        x = T.Tensor(rng.standard_normal((5, 3)))
        state = adam(0.01)
        for _ in range(20):
            zero_grad({"w": w})
            T.backward(T.cross_entropy(T.matmul(x, w), np.array([0, 1, 0, 1, 1])))
            optimizer_step({"w": w}, state)
        return w.data.tobytes()

    assert run() == run()
