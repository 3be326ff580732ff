"""AdamW with decoupled weight decay."""
from __future__ import annotations

import numpy as np


class AdamW:
    def __init__(self, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, store) -> None:
        """Update every trainable parameter in the store from its accumulated gradient."""
        b1, b2 = self.betas
        for name, p in store.trainable_items():
            if p.grad is None:
                raise ValueError(f"missing gradient for trainable parameter {name}")
            g = p.grad
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self._m[name] = m
                self._v[name] = np.zeros_like(p.data)
                self._t[name] = 0
            v = self._v[name]
            self._t[name] += 1
            t = self._t[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            p.data -= self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)
