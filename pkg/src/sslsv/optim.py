"""Adam, step-decay learning-rate schedule and EER-based early stopping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeError

__all__ = ["AdamState", "adam_step", "LrSchedule", "lr_at_epoch", "EarlyStop"]


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kwargs) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kwargs)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("parameter, gradient and state lists differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient passed to Adam")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class LrSchedule:
    initial: float = 1e-3
    decay_factor: float = 0.95
    decay_every: int = 10

    def __post_init__(self):
        if self.initial <= 0 or not 0 < self.decay_factor <= 1 or self.decay_every < 1:
            raise ValueError("invalid learning-rate schedule")

    def __call__(self, epoch: int) -> float:
        return lr_at_epoch(self, epoch)


def lr_at_epoch(sched: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return sched.initial * sched.decay_factor ** (epoch // sched.decay_every)


@dataclass
class EarlyStop:
    """Stop once the EER has not strictly improved for more than ``patience`` evaluations."""

    patience: int = 50
    best_metric: float = math.inf
    epochs_since_best: int = 0
    history: list[float] = field(default_factory=list)

    def update(self, eval_eer: float) -> bool:
        """Record one evaluation; returns True to continue, False to stop."""
        self.history.append(float(eval_eer))
        if eval_eer < self.best_metric:
            self.best_metric = float(eval_eer)
            self.epochs_since_best = 0
        else:
            self.epochs_since_best += 1
        return self.epochs_since_best <= self.patience

    @property
    def improved(self) -> bool:
        return self.epochs_since_best == 0 and bool(self.history)
