"""SGD and Adam updates over named parameter tensors."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


def sgd(learning_rate):
    return OptimizerState(kind="sgd", learning_rate=learning_rate)


def adam(learning_rate, beta1=0.9, beta2=0.999, epsilon=1e-8):
    return OptimizerState(kind="adam", learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon)


def optimizer_step(params, state):
    """Update ``params`` (a name -> Tensor mapping) in place from their ``.grad``.

    Gradients are left as they are; the caller clears them.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"optimizer_step: no gradient for {', '.join(sorted(missing))}")
    state.step += 1
    lr = state.learning_rate
    if state.kind == "sgd":
        for p in params.values():
            p.data -= (lr * p.grad).astype(p.dtype, copy=False)
        return
    b1, b2, eps, t = state.beta1, state.beta2, state.epsilon, state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ContractError(f"optimizer_step: moment shape {m.shape} does not match parameter {name} {p.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.first_moment[name] = m.astype(p.dtype, copy=False)
        state.second_moment[name] = v.astype(p.dtype, copy=False)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= update.astype(p.dtype, copy=False)


def zero_grad(params):
    for p in params.values():
        p.grad = None
