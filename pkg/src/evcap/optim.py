"""Adam with a warmup + cosine-decay learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .model import ParamDict


def cosine_warmup_lr(step: int, total_steps: int, peak_lr: float, warmup_frac: float = 0.05) -> float:
    """Linear warmup to peak_lr over the first warmup_frac of steps, then
    cosine decay to zero. `step` counts from 0."""
    warmup = max(1, int(round(total_steps * warmup_frac)))
    if step < warmup:
        return peak_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: ParamDict, lr: float, skip: set[str] | frozenset[str] = frozenset()) -> None:
        """Update every parameter that accumulated a gradient; clears grads."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            if name in skip or p.grad is None:
                p.grad = None
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m = self._m.setdefault(name, np.zeros_like(p.data))
            v = self._v.setdefault(name, np.zeros_like(p.data))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - np.asarray(lr * update, dtype=p.data.dtype)
            p.grad = None
