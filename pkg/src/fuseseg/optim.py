"""SGD with momentum and L2 weight decay, plus the polynomial LR schedule.

The update per parameter is

    g <- grad + weight_decay * p
    v <- momentum * v + g
    p <- p - lr * v

with velocity buffers that persist across steps.  Only Parameters are
touched; fusion constants and batch-norm running statistics are not
parameters and therefore never updated here.
"""

from __future__ import annotations

import numpy as np

from .errors import ScheduleError, TrainingError
from .tensor import Parameter


def poly_lr(base: float, iteration: int, max_iter: int, power: float = 0.9) -> float:
    """base * (1 - iteration/max_iter) ** power."""
    if iteration < 0 or iteration > max_iter:
        raise ScheduleError(f"iteration {iteration} outside [0, {max_iter}]")
    return base * (1.0 - iteration / max_iter) ** power


class SGDMomentum:
    def __init__(self, params: list[Parameter], momentum: float = 0.9,
                 weight_decay: float = 0.0005):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise TrainingError("duplicate parameter names")
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        for p in self.params:
            if p.grad is None:
                raise TrainingError(f"parameter {p.name} has no gradient")
            g = p.grad + p.data.dtype.type(self.weight_decay) * p.data
            v = self.velocity[p.name]
            v *= p.data.dtype.type(self.momentum)
            v += g
            p.data = p.data - p.data.dtype.type(lr) * v

    def state_entries(self):
        """Velocity buffers, named for checkpointing."""
        return [(f"opt.velocity.{name}", v) for name, v in self.velocity.items()]
