"""Heavy-ball SGD and the progress-driven learning-rate / adversarial ramps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tensor
from .losses import PER_BATCH_EMA, WEIGHT_MODES, WEIGHT_NORMS
from .model import ConfigError

VARIANTS = ("SAN", "SAN_selective", "SAN_entropy", "DANN", "source_only")


@dataclass
class TrainConfig:
    eta0: float = 0.001
    alpha: float = 10.0
    beta: float = 0.75
    momentum: float = 0.9
    gamma_ramp: float = 10.0
    total_steps: int = 2000
    batch_size: int = 64
    entropy_coef: float = 1.0
    seed: int = 0
    variant: str = "SAN"
    weight_mode: str = PER_BATCH_EMA
    new_layer_lr_multiplier: float = 10.0
    ema_decay: float = 0.9
    class_weight_norm: str = "none"
    detach_weights: bool = True
    hidden_dims: tuple = (64,)
    feature_dim: int = 32
    disc_hidden: int = 32
    dtype: str = "float64"

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        self.validate()

    def validate(self) -> None:
        if not self.eta0 > 0:
            raise ConfigError(f"eta0 must be > 0, got {self.eta0}")
        if not self.beta > 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.gamma_ramp < 0:
            raise ConfigError(f"gamma_ramp must be >= 0, got {self.gamma_ramp}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 (one source and one target row), got {self.batch_size}")
        if not self.entropy_coef >= 0:
            raise ConfigError(f"entropy_coef must be >= 0, got {self.entropy_coef}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"unknown weight_mode {self.weight_mode!r}; expected one of {WEIGHT_MODES}")
        if self.new_layer_lr_multiplier <= 0:
            raise ConfigError("new_layer_lr_multiplier must be > 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.class_weight_norm not in WEIGHT_NORMS:
            raise ConfigError(f"unknown class_weight_norm {self.class_weight_norm!r}; expected one of {WEIGHT_NORMS}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")


def _check_progress(p: float) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"training progress must lie in [0, 1], got {p}")
    return p


def lr_schedule(p: float, cfg: TrainConfig) -> float:
    """``eta0 / (1 + alpha*p)**beta``."""
    p = _check_progress(p)
    return cfg.eta0 / (1.0 + cfg.alpha * p) ** cfg.beta


def lambda_schedule(p: float, cfg: TrainConfig) -> float:
    """Adversarial weight ramp ``2 / (1 + exp(-gamma*p)) - 1``, rising from 0 toward 1."""
    p = _check_progress(p)
    return 2.0 / (1.0 + math.exp(-cfg.gamma_ramp * p)) - 1.0


def progress(step: int, total_steps: int) -> float:
    return min(max(step / total_steps, 0.0), 1.0)


@dataclass
class OptState:
    velocity: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "OptState":
        return cls([np.zeros_like(p.data) for p in params])


def sgd_momentum_step(
    params: Sequence[Tensor],
    grads: Sequence,
    state: OptState,
    lr: float,
    cfg: TrainConfig,
    new_flags: Sequence[bool] = (),
) -> OptState:
    """``v <- momentum*v + g``; ``param <- param - lr_eff*v``.

    ``lr_eff`` is ``lr * cfg.new_layer_lr_multiplier`` where ``new_flags`` is
    true. Missing gradients (``None``) count as zero. Parameter tensors get
    fresh data arrays; the returned state holds the new velocities.
    """
    if len(grads) != len(params) or len(state.velocity) != len(params):
        raise ShapeError(f"{len(params)} params, {len(grads)} grads, {len(state.velocity)} velocity buffers")
    flags = list(new_flags) or [False] * len(params)
    velocity = []
    for p, g, v, is_new in zip(params, grads, state.velocity, flags):
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g)
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"param {p.shape}, grad {g.shape}, velocity {v.shape} must match")
        v_new = cfg.momentum * v + g
        step_lr = lr * cfg.new_layer_lr_multiplier if is_new else lr
        data = p.data - step_lr * v_new
        data.setflags(write=False)
        p.data = data
        velocity.append(v_new)
    return OptState(velocity)
