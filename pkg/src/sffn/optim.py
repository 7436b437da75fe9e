from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamConfig:
    lr: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 100
    end_lr: float = 0.0
    power: float = 1.0


def polynomial_decay_lr(step: int, total_steps: int, cfg: AdamConfig) -> float:
    """Linear warmup to the peak, then polynomial decay to ``end_lr`` at ``total_steps``."""
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(total_steps - cfg.warmup_steps, 1)
    frac = min(max(step - cfg.warmup_steps, 0) / span, 1.0)
    return (cfg.lr - cfg.end_lr) * (1.0 - frac) ** cfg.power + cfg.end_lr


@dataclass
class Adam:
    """Adam with decoupled weight decay; updates parameter arrays in place."""

    cfg: AdamConfig
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        b1, b2 = self.cfg.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in sorted(params):
            p = params[name]
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if self.cfg.weight_decay:
                p *= 1.0 - lr * self.cfg.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.cfg.eps)
