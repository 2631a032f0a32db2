import numpy as np
import pytest

from dqkit.tensor import Tape, backward


def fd_gradcheck(f, xs, eps=1e-5):
    """Max relative error between analytic grads of f(xs) and central finite
    differences. f must be a pure function of the tensors in xs."""
    for x in xs:
        x.zero_grad()
    with Tape() as tape:
        loss = f(xs)
        backward(loss, tape)
    grads = [x.grad.copy() for x in xs]
    maxrel = 0.0
    for x, g in zip(xs, grads):
        flat = x.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = f(xs).item()
            flat[i] = orig - eps
            lm = f(xs).item()
            flat[i] = orig
            num[i] = (lp - lm) / (2 * eps)
        denom = np.maximum(np.abs(num), np.maximum(np.abs(g.reshape(-1)), 1e-8))
        maxrel = max(maxrel, float(np.max(np.abs(num - g.reshape(-1)) / denom)))
    return maxrel


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
