"""SGD with optional momentum and weight decay, gated by a gradient mask."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .gradmask import GradMask, apply_mask
from .transformer import ParamSet


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"optim.lr must be positive, got {self.lr}")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError(f"optim.momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"optim.weight_decay must be non-negative, got {self.weight_decay}")


@dataclass
class SGD:
    """Masked SGD.

    The mask is applied to the raw gradient before it enters the momentum
    buffer, and the update (momentum and decay included) is written only
    where the mask support is true, so frozen entries stay bit-identical.
    Passing ``mask=None`` takes the plain unmasked path.
    """

    params: ParamSet
    cfg: OptimConfig
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, mask: GradMask | None = None) -> None:
        grads = {}
        for p in self.params:
            if p.tensor.grad is None:
                raise ContractError(f"parameter {p.name!r} has no gradient; run backward first")
            grads[p.name] = p.tensor.grad
        if mask is not None:
            grads = apply_mask(grads, mask)
        lr, mu, wd = self.cfg.lr, self.cfg.momentum, self.cfg.weight_decay
        for p in self.params:
            theta = p.tensor.data
            g = grads[p.name]
            if mu > 0:
                buf = self.buffers.get(p.name)
                buf = g.copy() if buf is None else mu * buf + g
                self.buffers[p.name] = buf
                g = buf
            update = lr * g
            if wd > 0:
                update = update + lr * wd * theta
            if mask is None or p.name not in mask.maskable:
                theta -= update
            else:
                np.copyto(theta, theta - update, where=mask.support[p.name])
        zero_grads(self.params)


def step(params: ParamSet, mask: GradMask | None, cfg: OptimConfig, buffers: dict | None = None) -> None:
    """Functional form of :meth:`SGD.step`; ``buffers`` carries momentum state across calls."""
    opt = SGD(params, cfg, buffers if buffers is not None else {})
    opt.step(mask)


def zero_grads(params: ParamSet) -> None:
    for p in params:
        if p.tensor.grad is None:
            p.tensor.grad = np.zeros_like(p.tensor.data)
        else:
            p.tensor.grad[...] = 0.0
