"""Loss terms of the selective adversarial objective.

Normalisers use batch counts: the label loss averages over source rows, the
entropy over target rows and each discriminator loss over all ``m`` rows.
Domain labels are 0 for source rows and 1 for target rows.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ConfigError

SOURCE, TARGET = 0, 1
PER_BATCH_EMA = "per_batch_ema"
FULL_TARGET_RECOMPUTE = "full_target_recompute"
WEIGHT_MODES = (PER_BATCH_EMA, FULL_TARGET_RECOMPUTE)
WEIGHT_NORMS = ("none", "max", "mean")


class EmptyTargetWarning(UserWarning):
    """A loss or weight update was asked to work on zero target rows."""


@dataclass(frozen=True)
class ClassWeightState:
    weights: np.ndarray
    ema_decay: float = 0.9
    mode: str = PER_BATCH_EMA
    updates: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.mode not in WEIGHT_MODES:
            raise ConfigError(f"unknown weight mode {self.mode!r}; expected one of {WEIGHT_MODES}")
        w = np.array(self.weights, dtype=np.float64)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, K: int, ema_decay: float = 0.9, mode: str = PER_BATCH_EMA) -> "ClassWeightState":
        return cls(np.full(K, 1.0 / K), ema_decay, mode)


@dataclass
class LossBreakdown:
    label_loss: float
    entropy_loss: float
    domain_loss: float
    total: float
    per_class_domain_loss: list = field(default_factory=list)
    lam: float = 0.0
    entropy_coef: float = 0.0
    empty_target: bool = False


def label_loss(class_probs: Tensor, labels) -> Tensor:
    if class_probs.shape[0] == 0:
        raise ValueError("label loss needs at least one source row")
    return ad.cross_entropy(class_probs, labels)


def entropy_rows(probs: Tensor) -> Tensor:
    """Per-row Shannon entropy ``-sum_k p log p`` (log clamped)."""
    return -ad.sum(ad.mul(probs, ad.log(probs)), axis=1)


def entropy_loss(class_probs: Tensor) -> Tensor:
    """Mean conditional entropy of the target predictions.

    Zero target rows give a zero loss and an :class:`EmptyTargetWarning`.
    """
    if class_probs.shape[0] == 0:
        warnings.warn("entropy loss on an empty target batch", EmptyTargetWarning, stacklevel=2)
        return Tensor(0.0, dtype=class_probs.data.dtype)
    return ad.mean(entropy_rows(class_probs))


def instance_weighted_domain_loss(domain_probs: Sequence[Tensor], instance_weights, domain_labels) -> list:
    """One scalar per discriminator: ``(1/m) sum_i yhat_i^k * CE(G_d^k(f_i), d_i)``.

    ``instance_weights`` is either a constant ``m x K`` array (the detached
    path) or a Tensor, in which case gradients also flow through it.
    """
    d = np.asarray(domain_labels)
    K = len(domain_probs)
    m = d.shape[0]
    w_shape = instance_weights.shape
    if len(w_shape) != 2 or w_shape[0] != m or w_shape[1] != K:
        raise ad.ShapeError(f"instance weights {w_shape} disagree with {m} rows and {K} discriminators")
    if m == 0:
        raise ValueError("domain loss needs at least one row")
    out = []
    for k, probs_k in enumerate(domain_probs):
        if probs_k.shape != (m, 2):
            raise ad.ShapeError(f"discriminator {k} output has shape {probs_k.shape}, expected ({m}, 2)")
        nll = ad.nll_rows(probs_k, d)
        if isinstance(instance_weights, Tensor):
            weighted = ad.mul(nll, ad.column(instance_weights, k))
        else:
            weighted = ad.weight(nll, np.asarray(instance_weights)[:, k])
        out.append(ad.mean(weighted))
    return out


def class_weights(class_probs_target, state: ClassWeightState) -> ClassWeightState:
    """Fold target predictions into the class-level weights.

    ``per_batch_ema``: ``w <- decay*w + (1-decay)*colmean``.
    ``full_target_recompute``: ``w <- colmean`` over the rows given, which
    should be the whole target set. Empty input returns ``state`` unchanged.
    """
    p = class_probs_target.data if isinstance(class_probs_target, Tensor) else np.asarray(class_probs_target)
    if p.shape[0] == 0:
        warnings.warn("class weight update with no target rows", EmptyTargetWarning, stacklevel=2)
        return state
    if p.shape[1] != state.weights.shape[0]:
        raise ad.ShapeError(f"target predictions have {p.shape[1]} classes, weights have {state.weights.shape[0]}")
    col_mean = p.astype(np.float64).mean(axis=0)
    if state.mode == PER_BATCH_EMA:
        new = state.ema_decay * state.weights + (1.0 - state.ema_decay) * col_mean
    else:
        new = col_mean
    return replace(state, weights=new, updates=state.updates + 1)


def rescale_weights(weights, norm: str = "none") -> np.ndarray:
    """Class weights as fed to the domain loss.

    ``none`` uses them as-is (they sum to 1); ``max`` divides by the largest
    weight; ``mean`` divides by the mean so they sum to K. All three leave
    a single-class weight of 1 unchanged.
    """
    w = np.asarray(weights, dtype=np.float64)
    if norm == "none" or w.size == 0:
        return w
    if norm == "max":
        return w / w.max()
    if norm == "mean":
        return w / w.mean()
    raise ConfigError(f"unknown class weight normalisation {norm!r}; expected one of {WEIGHT_NORMS}")


def _check_coef(name: str, v: float) -> float:
    v = float(v)
    if not v >= 0.0 or not math.isfinite(v):
        raise ConfigError(f"{name} must be a finite non-negative number, got {v}")
    return v


def san_objective(
    label: Tensor,
    entropy: Tensor,
    per_class: Sequence[Tensor],
    weights,
    lam: float,
    entropy_coef: float,
) -> tuple:
    """Combine the terms into ``(surrogate, breakdown)``.

    ``breakdown.total`` is the saddle-point objective
    ``L_y + entropy_coef*E - lam * sum_k w_k L_k``. ``surrogate`` is what gets
    backpropagated: ``L_y + entropy_coef*E + sum_k w_k L_k``. The ``-lam`` is
    supplied by the gradient reversal on the features, so discriminators
    descend their own loss while the extractor ascends it.
    """
    lam = _check_coef("lambda", lam)
    entropy_coef = _check_coef("entropy_coef", entropy_coef)
    w = np.asarray(weights.weights if isinstance(weights, ClassWeightState) else weights, dtype=np.float64)
    if w.shape != (len(per_class),):
        raise ad.ShapeError(f"{len(per_class)} discriminator losses but {w.shape} class weights")

    surrogate = label
    if entropy_coef:
        surrogate = surrogate + ad.scale(entropy, entropy_coef)
    domain = None
    for wk, lk in zip(w, per_class):
        term = ad.scale(lk, wk)
        domain = term if domain is None else domain + term
    if domain is not None:
        surrogate = surrogate + domain

    ly = label.item()
    e = entropy.item()
    per_class_vals = [lk.item() for lk in per_class]
    dl = float(np.dot(w, per_class_vals)) if per_class_vals else 0.0
    total = ly + entropy_coef * e - lam * dl
    breakdown = LossBreakdown(
        label_loss=ly,
        entropy_loss=e,
        domain_loss=dl,
        total=total,
        per_class_domain_loss=per_class_vals,
        lam=lam,
        entropy_coef=entropy_coef,
    )
    return surrogate, breakdown


def unweighted_domain_loss(domain_probs: Tensor, domain_labels) -> Tensor:
    """Single-discriminator loss ``(1/m) sum_i CE(G_d(f_i), d_i)``."""
    return ad.cross_entropy(domain_probs, domain_labels)
