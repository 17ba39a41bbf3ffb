"""AdamW over dicts of numpy parameters."""
from __future__ import annotations

import math

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


class AdamW:
    """Bias-corrected Adam with decoupled weight decay.

    Parameters are updated in place. ``state`` holds one ``(m, v)`` buffer
    pair per parameter name.
    """

    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        if lr < 0 or eps <= 0 or weight_decay < 0:
            raise ValueError("invalid AdamW hyperparameters")
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr=None) -> None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
                raise NonFiniteGradientError(f"non-finite gradient for {k!r} ({bad} entries)")
            if k not in params:
                raise KeyError(f"gradient for unknown parameter {k!r}")
            if np.shape(g) != params[k].shape:
                raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {params[k].shape}")
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for k, g in grads.items():
            p = params[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            p -= (lr / bc1) * m / (np.sqrt(v) / math.sqrt(bc2) + self.eps)


def cosine_lr(base_lr: float, step: int, total: int) -> float:
    if total <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total) / total))
