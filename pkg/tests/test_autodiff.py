import math
import zlib

import numpy as np
import pytest

from dualfed import autodiff as ad
from dualfed.autodiff import Tensor
from dualfed.errors import DimensionError, InputError, NumericalError, StateError

from conftest import numeric_grad, rel_err


def T(x, grad=False):
    return Tensor(np.array(x, dtype=float), requires_grad=grad)


# -- forward examples ---------------------------------------------------------

def test_matmul_examples():
    assert np.array_equal(ad.matmul(T([[1, 0], [0, 1]]), T([[3], [4]])).data, [[3], [4]])
    assert np.array_equal(ad.matmul(T([[1, 2]]), T([[3], [4]])).data, [[11]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_softmax_scale_layernorm_examples():
    assert np.array_equal(ad.softmax_rows(T([[0, 0]])).data, [[0.5, 0.5]])
    assert np.array_equal(ad.scale(T([[2, 4]]), 0.5).data, [[1, 2]])
    # mean 2, population std 1; the 1e-5 epsilon perturbs the result at the 1e-5 level
    np.testing.assert_allclose(ad.layernorm(T([[1, 3]])).data, [[-1, 1]], atol=1e-5)
    np.testing.assert_allclose(ad.layernorm(T([[1, 3]]), eps=0.0).data, [[-1, 1]], atol=1e-15)


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(0).normal(scale=30, size=(5, 7))
    s = ad.softmax_rows(T(x)).data
    assert np.abs(s.sum(axis=-1) - 1).max() < 1e-12


def test_cross_entropy_examples():
    assert ad.cross_entropy(T([[0, 0]]), [1]).item() == pytest.approx(math.log(2), abs=1e-12)
    confident = ad.cross_entropy(T([[1000, 0]]), [0]).item()
    assert math.isfinite(confident) and confident == pytest.approx(0.0, abs=1e-12)
    z = T([[0, 0]], grad=True)
    ad.reset_tape()
    ad.backward(ad.cross_entropy(z, [1]))
    np.testing.assert_allclose(z.grad, [[0.5, -0.5]], atol=1e-15)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(InputError):
        ad.cross_entropy(T([[0, 0]]), [2])
    with pytest.raises(InputError):
        ad.cross_entropy(T([[0, 0], [1, 1]]), [0])


def test_matmul_gradient_example():
    A, B = T([[1, 2]], grad=True), T([[3], [4]])
    ad.reset_tape()
    ad.backward(ad.sum(ad.matmul(A, B)))
    np.testing.assert_allclose(A.grad, [[3, 4]], atol=0)
    (num,) = numeric_grad(lambda: ad.sum(ad.matmul(Tensor(A.data), B)).item(), [A.data])
    np.testing.assert_allclose(num, [[3, 4]], rtol=1e-8)


# -- backward semantics -------------------------------------------------------

def test_sum_gradient_is_ones():
    x = T([1, 2, 3], grad=True)
    ad.reset_tape()
    ad.backward(ad.sum(x))
    assert np.array_equal(x.grad, [1, 1, 1])


def test_shared_leaf_accumulates():
    x = T([[1.0, -2.0]], grad=True)
    ad.reset_tape()
    y = ad.add(ad.scale(x, 3.0), ad.scale(x, 4.0))
    ad.backward(ad.sum(y))
    assert np.array_equal(x.grad, [[7.0, 7.0]])


def test_backward_twice_is_state_error():
    x = T([1.0, 2.0], grad=True)
    ad.reset_tape()
    loss = ad.sum(x)
    ad.backward(loss)
    with pytest.raises(StateError):
        ad.backward(loss)


def test_frozen_weight_gets_no_grad_but_passes_it_through():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(3, 4))
    x0 = rng.normal(size=(2, 4))

    frozen_W = Tensor(W)
    x = Tensor(x0.copy(), requires_grad=True)
    ad.reset_tape()
    ad.backward(ad.sum(ad.gelu(ad.linear(x, frozen_W))))
    assert frozen_W.grad is None

    live_W = Tensor(W, requires_grad=True)
    x2 = Tensor(x0.copy(), requires_grad=True)
    ad.reset_tape()
    ad.backward(ad.sum(ad.gelu(ad.linear(x2, live_W))))
    assert x.grad.tobytes() == x2.grad.tobytes()

    (num,) = numeric_grad(lambda: ad.sum(ad.gelu(ad.linear(Tensor(x0), frozen_W))).item(), [x0])
    assert rel_err(x.grad, num) < 1e-4


def test_no_grad_records_nothing():
    x = T([1.0, 2.0], grad=True)
    ad.reset_tape()
    with ad.no_grad():
        y = ad.scale(x, 2.0)
    assert not y.requires_grad
    assert ad.current_tape().nodes == []


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_values_raise():
    with pytest.raises(NumericalError):
        Tensor([1.0, float("nan")])
    with pytest.raises(NumericalError):
        ad.scale(T([1e300]), 1e300)


def test_rank_and_empty_limits():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((1, 1, 1, 1)))
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3)))


# -- finite-difference property sweep -----------------------------------------

def _rand(rng, *shape):
    return rng.normal(size=shape)


OPS = {
    "add": lambda rng: ((_rand(rng, 3, 4), _rand(rng, 4)), lambda a, b: ad.add(a, b)),
    "scale": lambda rng: ((_rand(rng, 2, 5),), lambda a: ad.scale(a, 0.7)),
    "matmul": lambda rng: ((_rand(rng, 3, 4), _rand(rng, 4, 2)), lambda a, b: ad.matmul(a, b)),
    "matmul_batched": lambda rng: (
        (_rand(rng, 2, 3, 4), _rand(rng, 2, 4, 3)), lambda a, b: ad.matmul(a, b)
    ),
    "linear": lambda rng: (
        (_rand(rng, 2, 3, 4), _rand(rng, 5, 4), _rand(rng, 5)), lambda x, w, b: ad.linear(x, w, b)
    ),
    "gelu": lambda rng: ((_rand(rng, 3, 4),), ad.gelu),
    "relu": lambda rng: ((np.sign(z := _rand(rng, 3, 4)) * (np.abs(z) + 0.05),), ad.relu),
    "layernorm": lambda rng: ((_rand(rng, 2, 3, 6),), ad.layernorm),
    "softmax_rows": lambda rng: ((_rand(rng, 2, 3, 4),), ad.softmax_rows),
    "mean": lambda rng: ((_rand(rng, 2, 3, 4),), lambda a: ad.mean(a, axis=1)),
    "split_merge_heads": lambda rng: (
        (_rand(rng, 2, 3, 8),), lambda a: ad.merge_heads(ad.gelu(ad.split_heads(a, 2)), 2)
    ),
    "transpose": lambda rng: ((_rand(rng, 2, 3, 4),), lambda a: ad.transpose(a, (0, 2, 1))),
    "cross_entropy": lambda rng: (
        (_rand(rng, 5, 2),), lambda z, y=rng.integers(0, 2, 5): ad.cross_entropy(z, y)
    ),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        arrays, op = OPS[name](rng)
        weights = None

        def loss(tensors):
            nonlocal weights
            out = op(*tensors)
            if out.ndim == 0:
                return out
            if weights is None:
                weights = rng.normal(size=out.shape)
            flat = ad.reshape(out, (out.data.size,))
            return ad.matmul(flat, Tensor(weights.reshape(-1)))

        params = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        ad.reset_tape()
        ad.backward(loss(params))
        nums = numeric_grad(lambda: loss([Tensor(a) for a in arrays]).item(), list(arrays))
        for p, num in zip(params, nums):
            worst = max(worst, rel_err(p.grad, num))
    assert worst < 1e-4, f"{name}: worst relative error {worst:.2e}"


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(3, 2, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(8, 8)), requires_grad=True)
        ad.reset_tape()
        out = ad.mean(ad.softmax_rows(ad.layernorm(ad.linear(x, w))), axis=1)
        loss = ad.sum(ad.gelu(out))
        ad.backward(loss)
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_library_gradient_check_flags_wrong_rule():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3)), requires_grad=True)
    assert max(ad.gradient_check(lambda: ad.sum(ad.gelu(x)), [x])) < 1e-8

    def bad_scale(a, c):
        return ad._result(a.data * c, (a,), lambda g: (g * (c + 1.0),), "scale")

    errs = ad.gradient_check(lambda: ad.sum(bad_scale(x, 2.0)), [x])
    assert errs[0] > 0.1
