"""Minimal tape-based reverse-mode automatic differentiation over numpy arrays.

Every op defined here checks its output for non-finite values and, when any
operand requires a gradient, appends a node ``(output, operands, rule)`` to the
current thread's tape. :func:`backward` replays the tape in reverse.

Frozen tensors (``requires_grad=False``) never receive a gradient buffer, but
gradients still flow *through* the ops that consume them.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, InputError, NumericalError, StateError

LAYERNORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715

_state = threading.local()


class Tape:
    """Append-only record of the ops executed during one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.nodes)


def current_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _state.tape = tape
    return tape


def reset_tape() -> None:
    """Drop whatever has been recorded on this thread and start a fresh tape."""
    _state.tape = Tape()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording them (inference, finite differences)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense float64 array of rank 0-3 with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 3:
            raise DimensionError(f"tensors are limited to rank 3, got shape {arr.shape}")
        if 0 in arr.shape:
            raise DimensionError(f"zero-sized dimension in shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericalError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.name = name
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> Tensor:
        return Tensor(self.data, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"{op} produced non-finite values")


def _result(data: np.ndarray, parents: tuple[Tensor, ...], rule: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    out._tape = None
    out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        tape = current_tape()
        tape.nodes.append((out, parents, rule))
        out._tape = tape
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


# --------------------------------------------------------------------------
# ops
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; the lower-rank operand may broadcast over leading axes."""
    lo, hi = (a.shape, b.shape) if a.ndim <= b.ndim else (b.shape, a.shape)
    if hi[len(hi) - len(lo):] != lo:
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def rule(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _result(a.data + b.data, (a, b), rule, "add")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def rule(g):
        return (g * c,)

    return _result(a.data * c, (a,), rule, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for rank 1-3 operands (rank-3 @ rank-3 is batched)."""
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if a.shape[-1] != inner_b:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim == 3 and (a.ndim != 3 or a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul: batch mismatch, {a.shape} @ {b.shape}")

    A = a.data[None, :] if a.ndim == 1 else a.data
    B = b.data[:, None] if b.ndim == 1 else b.data
    C = np.matmul(A, B)
    out = C
    if b.ndim == 1:
        out = out[..., 0]
    if a.ndim == 1:
        out = out[0]

    def rule(g):
        G = g
        if a.ndim == 1 and b.ndim == 1:
            G = np.reshape(g, (1, 1))
        elif a.ndim == 1:
            G = g[None, :]
        elif b.ndim == 1:
            G = g[..., None]
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(G, np.swapaxes(B, -1, -2))
            ga = ga.reshape(a.shape)
        if b.requires_grad:
            if B.ndim == 3:
                gb = np.matmul(np.swapaxes(A, -1, -2), G)
            else:
                gb = A.reshape(-1, A.shape[-1]).T @ G.reshape(-1, G.shape[-1])
            gb = gb.reshape(b.shape)
        return ga, gb

    return _result(np.array(out), (a, b), rule, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T (+ b)`` for ``w`` of shape (d, m); x may carry leading batch axes."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def rule(g):
        gx = g @ w.data if x.requires_grad else None
        gw = gb = None
        if w.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        if b is not None and b.requires_grad:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    return _result(out, parents, rule, "linear")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def rule(g):
        return (np.transpose(g, inv),)

    return _result(np.transpose(a.data, axes), (a,), rule, "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
    if out.ndim > 3:
        raise DimensionError(f"reshape: rank {out.ndim} exceeds 3")

    def rule(g):
        return (g.reshape(a.shape),)

    return _result(out, (a,), rule, "reshape")


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """(n, T, h) -> (n * heads, T, h / heads)."""
    n, t, h = x.shape
    if h % num_heads:
        raise DimensionError(f"split_heads: width {h} not divisible by {num_heads} heads")
    dh = h // num_heads
    out = x.data.reshape(n, t, num_heads, dh).transpose(0, 2, 1, 3).reshape(n * num_heads, t, dh)

    def rule(g):
        return (g.reshape(n, num_heads, t, dh).transpose(0, 2, 1, 3).reshape(n, t, h),)

    return _result(out, (x,), rule, "split_heads")


def merge_heads(x: Tensor, num_heads: int) -> Tensor:
    """(n * heads, T, dh) -> (n, T, heads * dh); inverse of :func:`split_heads`."""
    nh, t, dh = x.shape
    if nh % num_heads:
        raise DimensionError(f"merge_heads: leading axis {nh} not divisible by {num_heads}")
    n = nh // num_heads
    out = x.data.reshape(n, num_heads, t, dh).transpose(0, 2, 1, 3).reshape(n, t, num_heads * dh)

    def rule(g):
        return (g.reshape(n, t, num_heads, dh).transpose(0, 2, 1, 3).reshape(nh, t, dh),)

    return _result(out, (x,), rule, "merge_heads")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    t = np.tanh(_GELU_C * (v + _GELU_K * (v * v * v)))
    out = 0.5 * v * (1.0 + t)

    def rule(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _result(out, (x,), rule, "gelu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def rule(g):
        return (g * mask,)

    return _result(x.data * mask, (x,), rule, "relu")


def layernorm(x: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize over the last axis with unit gain and zero bias."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("layernorm: empty normalization axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def rule(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _result(xhat, (x,), rule, "layernorm")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("softmax_rows: empty axis")
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), rule, "softmax_rows")


def mean(x: Tensor, axis: int) -> Tensor:
    count = x.shape[axis]

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / count,)

    return _result(x.data.mean(axis=axis), (x,), rule, "mean")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def rule(g):
        return (np.full(x.shape, float(g)),)

    return _result(np.asarray(x.data.sum()), (x,), rule, "sum")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true class under a row softmax."""
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise DimensionError(f"cross_entropy: expected (n, classes) logits, got {logits.shape}")
    y = np.asarray(labels)
    n, c = logits.shape
    if y.shape != (n,):
        raise InputError(f"cross_entropy: {y.shape[0] if y.ndim else 0} labels for {n} rows")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise InputError("cross_entropy: labels must be class indices")
        y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= c:
        raise InputError(f"cross_entropy: labels must lie in [0, {c - 1}]")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    se = e.sum(axis=1, keepdims=True)
    lse = (zmax + np.log(se))[:, 0]
    rows = np.arange(n)
    loss = np.asarray((lse - z[rows, y]).mean())

    def rule(g):
        d = e / se
        d[rows, y] -= 1.0
        return (d * (float(g) / n),)

    return _result(loss, (logits,), rule, "cross_entropy")


# --------------------------------------------------------------------------
# backward pass and gradient checking
# --------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise DimensionError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            loss.grad += 1.0
            return
        raise StateError("backward: loss does not depend on any trainable tensor")
    if tape.consumed:
        raise StateError("backward: tape already consumed; run a new forward pass first")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, parents, rule in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(parents, rule(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._tape is None:
                p.grad += pg
            else:
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    tape.consumed = True
    tape.nodes.clear()


def gradient_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    floor: float = 1e-7,
) -> list[float]:
    """Compare analytic gradients of ``fn()`` against central differences.

    Returns, per parameter, ``||analytic - numeric|| / max(||analytic||, ||numeric||, floor)``.
    The floor keeps gradients that are exactly zero (finite-difference noise
    only, around 1e-11) from reading as a 100% error. ``fn`` must rebuild the
    graph from ``params`` each call.
    """
    for p in params:
        p.zero_grad()
    reset_tape()
    backward(fn())
    analytic = [p.grad.copy() for p in params]

    errors = []
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            num = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = fn().item()
                flat[i] = orig - eps
                fm = fn().item()
                flat[i] = orig
                num[i] = (fp - fm) / (2.0 * eps)
            num = num.reshape(p.shape)
            denom = max(np.linalg.norm(ga), np.linalg.norm(num), floor)
            errors.append(float(np.linalg.norm(ga - num) / denom))
    for p in params:
        p.zero_grad()
    return errors
