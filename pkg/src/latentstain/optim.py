"""AdamW with decoupled weight decay, and the cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import InvalidArgumentError, Tensor


class MissingGradError(RuntimeError):
    pass


@dataclass
class Parameter:
    """Named trainable tensor; names are unique within a model."""
    name: str
    tensor: Tensor


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over a fixed parameter list.

    Per step, with bias-corrected moments m̂, v̂ and pre-update value θ:
        θ ← θ − lr · (m̂ / (√v̂ + eps) + weight_decay · θ)
    """

    params: list[Parameter]
    base_lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step_count: int = field(default=0, init=False)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise InvalidArgumentError(f"base_lr must be positive, got {self.base_lr}")
        b1, b2 = self.betas
        if not (0.0 < b1 < 1.0 and 0.0 < b2 < 1.0):
            raise InvalidArgumentError(f"betas must lie in (0,1), got {self.betas}")
        if self.weight_decay < 0:
            raise InvalidArgumentError(
                f"weight_decay must be nonnegative, got {self.weight_decay}")
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise InvalidArgumentError("duplicate parameter names")
        self._m = {p.name: np.zeros_like(p.tensor.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.tensor.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.tensor.grad = None

    def step(self, lr: float | None = None):
        """Apply one update; ``lr`` defaults to ``base_lr``."""
        if lr is None:
            lr = self.base_lr
        if lr < 0:
            raise InvalidArgumentError(f"lr must be nonnegative, got {lr}")
        for p in self.params:
            if p.tensor.grad is None:
                raise MissingGradError(f"parameter {p.name!r} has no gradient")
        b1, b2 = self.betas
        t = self.step_count + 1
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for p in self.params:
            g = p.tensor.grad
            m = self._m[p.name]
            v = self._v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            theta = p.tensor.data
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * theta
            theta -= (lr * update).astype(theta.dtype, copy=False)
            if not np.all(np.isfinite(theta)):
                raise FloatingPointError(
                    f"parameter {p.name!r} became non-finite after step {t}")
        self.step_count = t


def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    """Cosine annealing: base_lr · ½(1 + cos(π·epoch/total_epochs))."""
    if total_epochs <= 0:
        raise InvalidArgumentError(f"total_epochs must be positive, got {total_epochs}")
    if not 0 <= epoch <= total_epochs:
        raise InvalidArgumentError(
            f"epoch {epoch} outside [0, {total_epochs}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))
