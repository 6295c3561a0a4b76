"""Adam and plain SGD over lists of :class:`~orderlab.autodiff.Tensor` parameters."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import ShapeMismatch, Tensor


class Adam:
    """Bias-corrected Adam. Updates ``param.data`` in place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if len(grads) != len(self.params):
            raise ShapeMismatch(f"{len(grads)} gradients for {len(self.params)} parameters")
        for p, g in zip(self.params, grads):
            if g.shape != p.data.shape:
                raise ShapeMismatch(f"gradient {g.shape} for parameter {p.data.shape}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-2):
        self.params = list(params)
        self.lr = lr
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        for p, g in zip(self.params, grads):
            if g.shape != p.data.shape:
                raise ShapeMismatch(f"gradient {g.shape} for parameter {p.data.shape}")
        self.t += 1
        for p, g in zip(self.params, grads):
            p.data -= self.lr * g


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    if not arrays:
        return np.zeros(0)
    return np.concatenate([a.ravel() for a in arrays])


def unflatten(vec: np.ndarray, like: Sequence[Tensor]) -> list[np.ndarray]:
    out, i = [], 0
    for p in like:
        n = p.data.size
        out.append(vec[i:i + n].reshape(p.data.shape))
        i += n
    if i != vec.size:
        raise ShapeMismatch(f"vector of length {vec.size} for {i} parameter entries")
    return out
