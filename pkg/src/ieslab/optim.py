"""SGD / Adam / AdamW updates and per-epoch learning-rate schedules.

Update rules follow the usual PyTorch conventions: SGD and Adam add
``weight_decay * w`` to the gradient, AdamW decays the weights directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

KINDS = ("sgd", "adam", "adamw")
SCHEDULES = ("fixed", "linear", "multistep", "exponential")


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    kind: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "exponential"
    gamma: float = 0.96  # exponential factor; multistep uses multistep_gamma
    milestones: tuple[int, ...] = (50, 100)
    multistep_gamma: float = 0.1
    linear_start_factor: float = 1.0
    linear_end_factor: float = 0.01
    linear_total_iters: int = 150
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}; expected one of {KINDS}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def lr_at(cfg: OptimConfig, epoch: int, total_epochs: Optional[int] = None) -> float:
    """Learning rate for 0-based ``epoch``."""
    if epoch < 0 or (total_epochs is not None and epoch >= total_epochs):
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    if cfg.schedule == "fixed":
        return cfg.lr
    if cfg.schedule == "exponential":
        return cfg.lr * cfg.gamma ** epoch
    if cfg.schedule == "multistep":
        passed = sum(1 for m in cfg.milestones if epoch >= m)
        return cfg.lr * cfg.multistep_gamma ** passed
    frac = min(epoch, cfg.linear_total_iters) / cfg.linear_total_iters
    factor = cfg.linear_start_factor + (cfg.linear_end_factor - cfg.linear_start_factor) * frac
    return cfg.lr * factor


@dataclass
class Optimizer:
    cfg: OptimConfig
    names: Optional[Sequence[str]] = None
    step_count: int = 0
    _m: list = field(default_factory=list)
    _v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        """Update ``params`` in place."""
        if len(params) != len(grads):
            raise ValueError("params and grads differ in length")
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != g.shape:
                raise ValueError(f"{self._name(i)}: grad shape {g.shape} != param shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for parameter {self._name(i)}")
        if not self._m:
            self._m = [np.zeros_like(p) for p in params]
            if self.cfg.kind != "sgd":
                self._v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        if self.cfg.kind == "sgd":
            self._sgd(params, grads, lr)
        else:
            self._adam(params, grads, lr)

    def _name(self, i):
        return self.names[i] if self.names else f"param[{i}]"

    def _sgd(self, params, grads, lr):
        c = self.cfg
        for p, g, buf in zip(params, grads, self._m):
            if c.weight_decay:
                g = g + c.weight_decay * p
            if c.momentum:
                if self.step_count == 1:
                    buf[...] = g
                else:
                    buf *= c.momentum
                    buf += g
                g = buf
            p -= lr * g

    def _adam(self, params, grads, lr):
        c = self.cfg
        b1, b2 = c.betas
        t = self.step_count
        for p, g, m, v in zip(params, grads, self._m, self._v):
            if c.kind == "adamw":
                p *= 1 - lr * c.weight_decay
            elif c.weight_decay:
                g = g + c.weight_decay * p
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p -= lr * m_hat / (np.sqrt(v_hat) + c.eps)


def default_config(kind: str) -> OptimConfig:
    """Per-optimizer defaults used in the reference training recipes."""
    if kind == "sgd":
        return OptimConfig()
    if kind == "adam":
        return OptimConfig(kind="adam", lr=1e-3, momentum=0.0, weight_decay=0.0, schedule="fixed")
    if kind == "adamw":
        return OptimConfig(kind="adamw", lr=1e-3, momentum=0.0, weight_decay=0.01, schedule="fixed")
    raise ValueError(f"unknown optimizer {kind!r}")
