import math

import numpy as np

from dualfed.autodiff import Tensor
from dualfed.optim import AdamW


def test_first_step_by_hand():
    p = Tensor([1.0, -2.0], requires_grad=True)
    opt = AdamW([("p", p)], lr=0.1, weight_decay=0.5)
    p.grad[...] = [0.2, -4.0]
    opt.step()
    # bias-corrected moments at t=1 are g and g^2, so the step is g / (|g| + eps)
    want = [
        1.0 * (1 - 0.05) - 0.1 * 0.2 / (0.2 + 1e-8),
        -2.0 * (1 - 0.05) - 0.1 * -4.0 / (4.0 + 1e-8),
    ]
    np.testing.assert_allclose(p.data, want, rtol=0, atol=1e-15)


def test_second_step_by_hand():
    p = Tensor([0.5], requires_grad=True)
    opt = AdamW([("p", p)], lr=0.01, weight_decay=0.0)
    x = 0.5
    m = v = 0.0
    for t, g in enumerate([1.0, -3.0], start=1):
        p.grad[...] = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert abs(p.data[0] - x) < 1e-15


def test_zero_lr_is_bitwise_noop():
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(3, 4))
    vals[0, 0] = 0.0
    vals[0, 1] = -0.0
    p = Tensor(vals.copy(), requires_grad=True)
    opt = AdamW([("p", p)], lr=0.0)
    for _ in range(3):
        p.grad[...] = rng.normal(size=p.shape)
        opt.step()
    assert p.data.tobytes() == vals.tobytes()


def test_reset_is_per_tensor():
    a, b = Tensor([1.0], requires_grad=True), Tensor([1.0], requires_grad=True)
    opt = AdamW([("a", a), ("b", b)], lr=0.1)
    a.grad[...] = b.grad[...] = 1.0
    opt.step()
    opt.reset(["a"])
    assert "a" not in opt.state and opt.state["b"]["t"] == 1
    opt.step()
    assert opt.state["a"]["t"] == 1 and opt.state["b"]["t"] == 2
    opt.reset()
    assert opt.state == {}


def test_zero_grad():
    p = Tensor([1.0, 2.0], requires_grad=True)
    p.grad[...] = 5.0
    AdamW([("p", p)]).zero_grad()
    assert not p.grad.any()
