"""Adam with bias correction and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ConfigurationError, Parameter


@dataclass
class CosineSchedule:
    base_lr: float
    total_steps: int
    min_lr: float = 0.0

    def lr(self, step: int) -> float:
        """Learning rate for 1-based ``step``; decays from base_lr at step 1."""
        if self.total_steps <= 1:
            return self.base_lr
        t = min(max(step - 1, 0), self.total_steps) / self.total_steps
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + math.cos(math.pi * t))

    def to_dict(self) -> dict:
        return {"kind": "cosine", "base_lr": self.base_lr, "total_steps": self.total_steps, "min_lr": self.min_lr}


@dataclass
class OptimState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)


class Adam:
    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[tuple[str, Parameter]] = list(named_params)
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1 and eps > 0):
            raise ConfigurationError(f"invalid Adam hyperparameters beta1={beta1}, beta2={beta2}, eps={eps}")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = OptimState(
            m={n: np.zeros_like(p.data) for n, p in self.params},
            v={n: np.zeros_like(p.data) for n, p in self.params},
        )

    def step(self, lr: float) -> None:
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                bad = int(np.size(p.grad) - np.count_nonzero(np.isfinite(p.grad)))
                raise FloatingPointError(f"non-finite gradient in parameter {name!r} ({bad} entries)")
        self.state.step += 1
        t = self.state.step
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m, v = self.state.m[name], self.state.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def adam_step(params, grads, state: OptimState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional form over name -> array dicts; returns (new_params, state)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        m = state.m.get(name, np.zeros_like(p)) * beta1 + (1 - beta1) * g
        v = state.v.get(name, np.zeros_like(p)) * beta2 + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - lr * (m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + eps)
    return out, state
