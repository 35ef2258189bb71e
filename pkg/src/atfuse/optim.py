"""Decoupled-weight-decay Adam over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor


class MissingGradError(RuntimeError):
    """step() was called while a parameter had no gradient."""


class AdamW:
    """AdamW with bias-corrected moments and decay applied directly to weights.

    The update per parameter p with gradient g is

        m <- b1*m + (1-b1)*g          mhat = m / (1 - b1^t)
        v <- b2*v + (1-b2)*g^2        vhat = v / (1 - b2^t)
        p <- p - lr*wd*p - lr * mhat / (sqrt(vhat) + eps)

    so the decay term never passes through the moment estimates. The step
    counter t is shared across parameters and strictly increases.
    """

    def __init__(self, named_params, lr: float = 2e-3,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-2):
        self.params: list[tuple[str, Tensor]] = list(named_params)
        if not self.params:
            raise ValueError("optimizer needs at least one parameter")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.moments = {
            name: (np.zeros_like(p.data), np.zeros_like(p.data))
            for name, p in self.params
        }

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        if lr is not None:
            self.lr = float(lr)
        for name, p in self.params:
            if p.grad is None:
                raise MissingGradError("parameter %r has no gradient; run backward first" % name)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            m, v = self.moments[name]
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
