"""Adam optimizer (decoupled weight decay by default) and early stopping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .autograd import Tensor
from .errors import ContractError


@dataclass
class AdamConfig:
    lr: float = 4e-4
    beta1: float = 0.95
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    coupled_weight_decay: bool = False  # True -> classic L2-in-gradient


class Adam:
    """Adam over a named parameter dict; frozen tensors are never touched."""

    def __init__(self, params: Mapping[str, Tensor], config: Optional[AdamConfig] = None):
        self.config = config or AdamConfig()
        self.params = {n: p for n, p in params.items() if p.requires_grad}
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.step_count = 0

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        c = self.config
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - c.beta1 ** t
        bc2 = 1.0 - c.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if np.isnan(g).any():
                raise ContractError(f"NaN gradient in parameter {name!r}")
            if c.weight_decay:
                if c.coupled_weight_decay:
                    g = g + c.weight_decay * p.data
                else:
                    p.data -= c.lr * c.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            p.data -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moments and step count, for bit-exact checkpoint resume."""
        out = {"opt.step": np.array(float(self.step_count))}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]):
        self.step_count = int(arrays["opt.step"])
        for name in self.params:
            self.m[name] = arrays[f"opt.m.{name}"].copy()
            self.v[name] = arrays[f"opt.v.{name}"].copy()


@dataclass
class EarlyStopper:
    """Stop after `patience` consecutive epochs without metric improvement."""

    patience: int = 3
    best_value: float = field(default=-np.inf)
    best_epoch: int = -1
    _bad_epochs: int = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record an epoch's monitored metric; returns True if it improved."""
        if value > self.best_value:
            self.best_value = value
            self.best_epoch = epoch
            self._bad_epochs = 0
            return True
        self._bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self._bad_epochs >= self.patience
