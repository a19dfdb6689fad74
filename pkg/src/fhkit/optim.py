"""Optimizer and learning-rate plumbing shared by both trainers."""

from __future__ import annotations

import numpy as np


class Nadam:
    """Adam with Nesterov momentum (Dozat 2016), constant momentum schedule."""

    name = "nadam"

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2, t = self.beta1, self.beta2, self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = b1 * m / (1 - b1 ** (t + 1)) + (1 - b1) * g / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            params[k] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def l2_penalty(params: dict, scale: float):
    """``scale * sum ||W||^2`` over weight matrices (biases excluded) and its gradient."""
    loss = 0.0
    grads = {}
    for k, v in params.items():
        if v.ndim < 2 or scale == 0.0:
            continue
        loss += scale * float(np.sum(v * v))
        grads[k] = 2.0 * scale * v
    return loss, grads


def add_grads(acc: dict, other: dict) -> dict:
    for k, g in other.items():
        acc[k] = acc[k] + g if k in acc else g.copy()
    return acc


def newbob_update(history, lr, decay, lr_min):
    """Multiply ``lr`` by ``decay`` when the latest criterion (lower is better)
    did not improve on the best earlier value; never go below ``lr_min``."""
    history = list(history)
    if not history:
        raise ValueError("newbob needs at least one completed epoch")
    if len(history) == 1 or history[-1] < min(history[:-1]):
        return lr
    return max(lr * decay, lr_min)


def add_gradient_noise(grads: dict, variance: float, seed=None, rng=None) -> dict:
    """Add zero-mean Gaussian noise of the given variance to every entry."""
    if variance < 0:
        raise ValueError("variance must be >= 0")
    if variance == 0:
        return {k: g.copy() for k, g in grads.items()}
    if rng is None:
        rng = np.random.default_rng(seed)
    std = np.sqrt(variance)
    return {k: g + rng.normal(0.0, std, size=g.shape) for k, g in sorted(grads.items())}
