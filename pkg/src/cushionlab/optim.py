"""Adam with global-norm clipping and a warmup + cosine schedule."""

from __future__ import annotations

import math
from collections.abc import Sequence

import numpy as np

from .tensor import Tensor


class Adam:
    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        decay: Sequence[bool] | None = None,
    ) -> None:
        self.params = list(params)
        self.decay = list(decay) if decay is not None else [True] * len(self.params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def clip_grad_norm(self, max_norm: float) -> float:
        sq = sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in self.params if p.grad is not None)
        norm = math.sqrt(sq)
        if max_norm > 0 and norm > max_norm:
            k = max_norm / (norm + 1e-12)
            for p in self.params:
                if p.grad is not None:
                    p.grad = p.grad * np.asarray(k, dtype=p.grad.dtype)
        return norm

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v, dec in zip(self.params, self.m, self.v, self.decay):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and dec:
                update = update + self.weight_decay * p.data
            # params are rebound, never mutated: tensors handed out earlier stay valid
            p.data = (p.data - lr * update).astype(p.data.dtype, copy=False)


def cosine_lr(step: int, total: int, peak: float, warmup: int = 0, min_frac: float = 0.1) -> float:
    if warmup and step < warmup:
        return peak * (step + 1) / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return peak * (min_frac + (1.0 - min_frac) * 0.5 * (1.0 + math.cos(math.pi * progress)))
