from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteError


def warmup_cosine_lr(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear ramp ``base_lr * (step + 1) / warmup_steps``, then cosine decay
    reaching 0 at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class ParamStore:
    """Named parameters with their AdamW moments."""

    params: dict[str, np.ndarray]
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.exp_avg.setdefault(name, np.zeros_like(p))
            self.exp_avg_sq.setdefault(name, np.zeros_like(p))

    def check_finite(self) -> None:
        for name, p in self.params.items():
            if not np.all(np.isfinite(p)):
                raise NonFiniteError(f"parameter {name} is not finite")


@dataclass(frozen=True)
class AdamW:
    weight_decay: float = 5e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def step(self, store: ParamStore, grads: dict[str, np.ndarray], lr: float) -> None:
        """One decoupled-weight-decay Adam update, in place.

        Decay is ``p *= 1 - lr * weight_decay``, so ``lr == 0`` leaves ``p`` alone.
        """
        store.step += 1
        t = store.step
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in store.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
            m, v = store.exp_avg[name], store.exp_avg_sq[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if lr == 0.0:
                continue
            p *= 1.0 - lr * self.weight_decay
            p -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
        store.check_finite()
