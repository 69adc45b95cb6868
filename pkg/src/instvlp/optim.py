"""AdamW with decoupled weight decay and a warmup + per-epoch decay schedule."""

from __future__ import annotations

import numpy as np


class AdamW:
    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params, grads, lrs: dict[str, float]) -> None:
        """Update ``params`` in place for every name present in ``grads``."""
        for name in sorted(grads):
            g = grads[name]
            lr = lrs[name]
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            t = self.t.get(name, 0) + 1
            m = self.b1 * m + (1.0 - self.b1) * g
            v = self.b2 * v + (1.0 - self.b2) * g * g
            mhat = m / (1.0 - self.b1**t)
            vhat = v / (1.0 - self.b2**t)
            p = params[name]
            if p.ndim >= 2:
                p = p - lr * self.weight_decay * p
            params[name] = p - lr * mhat / (np.sqrt(vhat) + self.eps)
            self.m[name], self.v[name], self.t[name] = m, v, t


def lr_factor(stage_step: int, epoch: int, warmup: int, decay: float) -> float:
    """Linear warmup over ``warmup`` steps, then ``decay`` per completed epoch."""
    warm = min(1.0, (stage_step + 1) / warmup) if warmup > 0 else 1.0
    return warm * decay**epoch
