"""AdamW with decoupled weight decay, plus a cosine learning-rate schedule.

Operates on named dicts of numpy arrays so the same instance can drive any
parameter group. Updates are functional: `step` returns new arrays and only
the optimizer's own moment buffers mutate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self) -> None:
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractViolation("betas must lie in [0, 1)")
        if self.lr <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ContractViolation("lr and eps must be positive, decay >= 0")


class AdamW:
    """Decoupled weight decay: p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)."""

    def __init__(self, config: AdamWConfig = AdamWConfig()):
        self.config = config
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(
        self,
        params: dict[str, np.ndarray],
        grads: dict[str, np.ndarray],
        lr: float | None = None,
    ) -> dict[str, np.ndarray]:
        """One update over every named parameter; returns the new arrays."""
        if set(params) != set(grads):
            raise ContractViolation("params and grads must share the same names")
        c = self.config
        lr = c.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        out: dict[str, np.ndarray] = {}
        for name in params:
            p, g = params[name], grads[name]
            if p.shape != g.shape:
                raise ContractViolation(f"grad shape mismatch for {name}")
            if name not in self._m:
                self._m[name] = np.zeros_like(p)
                self._v[name] = np.zeros_like(p)
            m = self._m[name]
            v = self._v[name]
            m += (1.0 - c.beta1) * (g - m)
            v += (1.0 - c.beta2) * (g * g - v)
            m_hat = m / bc1
            v_hat = v / bc2
            out[name] = p - lr * (m_hat / (np.sqrt(v_hat) + c.eps)
                                  + c.weight_decay * p)
        return out


def cosine_lr(step: int, total_steps: int, base_lr: float,
              floor_frac: float = 0.01) -> float:
    """Cosine decay from base_lr at step 0 to floor_frac * base_lr at the end."""
    if total_steps <= 0:
        raise ContractViolation("total_steps must be positive")
    if not (0.0 <= floor_frac <= 1.0):
        raise ContractViolation("floor_frac must lie in [0, 1]")
    t = min(max(step, 0), total_steps)
    floor = floor_frac * base_lr
    return floor + 0.5 * (1.0 + math.cos(math.pi * t / total_steps)) * (base_lr - floor)
