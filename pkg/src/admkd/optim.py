"""SGD with momentum and step learning-rate schedules."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from .tensor import Tensor


class OptimizerError(ValueError):
    pass


@dataclass
class OptimState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise OptimizerError(f"lr must be positive, got {self.lr}")


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, Optional[np.ndarray]], state: OptimState) -> None:
    """g' = g + wd * theta;  v = mu * v + g';  theta = theta - lr * v.

    Parameters whose gradient is ``None`` are left untouched.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise OptimizerError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        dt = p.data.dtype.type
        if state.weight_decay:
            g = g + dt(state.weight_decay) * p.data
        v = state.velocity.get(name)
        v = g.astype(p.dtype, copy=True) if v is None else dt(state.momentum) * v + g
        state.velocity[name] = v
        p.data = (p.data - dt(state.lr) * v).astype(p.dtype, copy=False)


class SGD:
    """Holds named parameters and their velocity buffers."""

    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict(params)
        self.state = OptimState(lr, momentum, weight_decay)
        for name, p in self.params.items():
            self.state.velocity[name] = np.zeros_like(p.data)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        if not value > 0:
            raise OptimizerError(f"lr must be positive, got {value}")
        self.state.lr = value

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        sgd_step(self.params, {n: p.grad for n, p in self.params.items()}, self.state)

    def hyperparameters(self) -> dict:
        return {"lr": self.state.lr, "momentum": self.state.momentum, "weight_decay": self.state.weight_decay}


@dataclass
class Schedule:
    base_lr: float
    milestones: Sequence[int] = ()
    decay: float = 0.1

    def __post_init__(self):
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise OptimizerError(f"milestones must be strictly increasing, got {ms}")
        self.milestones = ms


def lr_at(schedule: Schedule, epoch: int) -> float:
    """base_lr * decay ** (number of milestones <= epoch)."""
    passed = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.base_lr * schedule.decay ** passed
