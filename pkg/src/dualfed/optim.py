"""AdamW with decoupled weight decay and per-tensor state."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .autodiff import Tensor


class AdamW:
    """Per-tensor moments and step counts, so a subset of tensors can be reset independently.

    Update for each parameter ``p`` with gradient ``g`` at its step ``t``::

        p <- p * (1 - lr * wd)
        m <- b1 m + (1 - b1) g ;  v <- b2 v + (1 - b2) g^2
        p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    """

    def __init__(
        self,
        params: Iterable[tuple[str, Tensor]],
        lr: float = 1e-3,
        weight_decay: float = 1e-2,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state: dict[str, dict] = {}
        self.steps_taken = 0

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def reset(self, names: Iterable[str] | None = None) -> None:
        """Forget moments for ``names`` (all tensors when None)."""
        if names is None:
            self.state.clear()
            return
        for name in names:
            self.state.pop(name, None)

    def step(self) -> None:
        lr, wd, b1, b2 = self.lr, self.weight_decay, self.beta1, self.beta2
        for name, p in self.params:
            st = self.state.get(name)
            if st is None:
                st = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
                self.state[name] = st
            g = p.grad
            st["t"] += 1
            t = st["t"]
            st["m"] = b1 * st["m"] + (1.0 - b1) * g
            st["v"] = b2 * st["v"] + (1.0 - b2) * (g * g)
            mhat = st["m"] / (1.0 - b1 ** t)
            vhat = st["v"] / (1.0 - b2 ** t)
            if lr == 0.0:  # moments still advance; parameters stay bitwise fixed (even -0.0)
                continue
            p.data *= 1.0 - lr * wd
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
        self.steps_taken += 1
