"""SAN network: feature extractor, label predictor and class-wise discriminators."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor


class ConfigError(ValueError):
    """Invalid model, loss or training configuration."""


@dataclass
class Layer:
    w: Tensor
    b: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine(x, self.w, self.b)


@dataclass
class SanModel:
    """Parameters of G_f (``feature_layers``), G_y (``head``) and the G_d^k heads.

    ``discriminators[k]`` is a two-layer MLP ending in a 2-way softmax; heads
    never share parameters. A model may carry fewer heads than classes (the
    single-discriminator baselines use one, ``source_only`` none).
    """

    input_dim: int
    hidden_dims: tuple
    feature_dim: int
    num_classes: int
    disc_hidden: int
    seed: int
    feature_layers: list
    head: Layer
    discriminators: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.num_classes

    def named_parameters(self):
        """Yield ``(name, tensor, is_new)``; ``is_new`` marks head and discriminator params."""
        for i, layer in enumerate(self.feature_layers):
            yield f"feature.{i}.w", layer.w, False
            yield f"feature.{i}.b", layer.b, False
        yield "head.w", self.head.w, True
        yield "head.b", self.head.b, True
        for k, (l1, l2) in enumerate(self.discriminators):
            yield f"disc.{k}.0.w", l1.w, True
            yield f"disc.{k}.0.b", l1.b, True
            yield f"disc.{k}.1.w", l2.w, True
            yield f"disc.{k}.1.b", l2.b, True

    def parameters(self) -> list:
        return [t for _, t, _ in self.named_parameters()]

    def feature_parameters(self) -> list:
        return [t for name, t, _ in self.named_parameters() if name.startswith("feature.")]

    def head_parameters(self) -> list:
        return [self.head.w, self.head.b]

    def discriminator_parameters(self, k: Optional[int] = None) -> list:
        heads = self.discriminators if k is None else [self.discriminators[k]]
        return [t for l1, l2 in heads for t in (l1.w, l1.b, l2.w, l2.b)]

    # -- pieces of the forward pass --------------------------------------

    def extract(self, x: Tensor) -> Tensor:
        # every layer is affine+relu; with no hidden layers the extractor is purely linear
        h = x
        for layer in self.feature_layers:
            h = layer(h)
            if self.hidden_dims:
                h = ad.relu(h)
        return h

    def classify(self, features: Tensor) -> Tensor:
        return ad.softmax_rows(self.head(features))

    def logits(self, features: Tensor) -> Tensor:
        return self.head(features)

    def discriminate(self, h: Tensor) -> list:
        return [ad.softmax_rows(l2(ad.relu(l1(h)))) for l1, l2 in self.discriminators]

    def clone(self) -> "SanModel":
        return from_state(*to_state(self))


@dataclass
class ForwardOutput:
    features: Tensor
    class_probs: Tensor
    domain_probs: list


def _check_dims(**dims) -> None:
    for name, v in dims.items():
        values = v if isinstance(v, (list, tuple)) else [v]
        for d in values:
            if not isinstance(d, (int, np.integer)) or d <= 0:
                raise ConfigError(f"{name} must be positive integers, got {v!r}")


def _init_layer(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> Layer:
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
    b = rng.uniform(-bound, bound, size=(fan_out,)).astype(dtype)
    return Layer(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))


def build_model(
    input_dim: int,
    hidden_dims: Sequence[int] = (64,),
    feature_dim: int = 32,
    num_classes: int = 10,
    disc_hidden: int = 32,
    seed: int = 0,
    num_discriminators: Optional[int] = None,
    dtype=np.float64,
) -> SanModel:
    """Build a model with fan-in scaled uniform init from ``seed``.

    Parameters are drawn in a fixed order (feature layers, head, then
    discriminators), so models that differ only in ``num_discriminators``
    share identical extractor and head weights for the same seed.
    """
    hidden_dims = tuple(int(h) for h in hidden_dims)
    n_disc = num_classes if num_discriminators is None else num_discriminators
    _check_dims(input_dim=input_dim, feature_dim=feature_dim, num_classes=num_classes, disc_hidden=disc_hidden)
    if hidden_dims:
        _check_dims(hidden_dims=hidden_dims)
    if not isinstance(n_disc, (int, np.integer)) or n_disc < 0:
        raise ConfigError(f"num_discriminators must be >= 0, got {n_disc!r}")

    rng = np.random.default_rng(seed)
    widths = (input_dim,) + hidden_dims + (feature_dim,)
    feature_layers = [_init_layer(rng, widths[i], widths[i + 1], dtype) for i in range(len(widths) - 1)]
    head = _init_layer(rng, feature_dim, num_classes, dtype)
    discs = [
        (_init_layer(rng, feature_dim, disc_hidden, dtype), _init_layer(rng, disc_hidden, 2, dtype))
        for _ in range(n_disc)
    ]
    return SanModel(
        input_dim=int(input_dim),
        hidden_dims=hidden_dims,
        feature_dim=int(feature_dim),
        num_classes=int(num_classes),
        disc_hidden=int(disc_hidden),
        seed=int(seed),
        feature_layers=feature_layers,
        head=head,
        discriminators=discs,
    )


def _as_input(model: SanModel, x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=model.head.w.data.dtype))
    if t.ndim != 2 or t.shape[1] != model.input_dim:
        raise ad.ShapeError(f"model expects inputs of shape (m, {model.input_dim}), got {t.shape}")
    return t


def forward(model: SanModel, x, lam: float = 0.0, tape: Optional[Tape] = None) -> ForwardOutput:
    """Run G_f, G_y and every discriminator behind one shared gradient reversal."""
    x = _as_input(model, x)
    if tape is None:
        return _forward(model, x, lam)
    with tape:
        return _forward(model, x, lam)


def _forward(model: SanModel, x: Tensor, lam: float) -> ForwardOutput:
    features = model.extract(x)
    class_probs = model.classify(features)
    domain_probs = model.discriminate(ad.grad_reverse(features, lam)) if model.discriminators else []
    return ForwardOutput(features, class_probs, domain_probs)


def predict_proba(model: SanModel, x) -> np.ndarray:
    x = _as_input(model, x).detach()
    return model.classify(model.extract(x)).data


def predict(model: SanModel, x) -> np.ndarray:
    """Row-wise argmax of the class probabilities; ties go to the lowest index."""
    return argmax_rows(predict_proba(model, x))


def argmax_rows(probs) -> np.ndarray:
    # np.argmax returns the first maximal index, which is the tie rule we want
    return np.argmax(np.asarray(probs), axis=1).astype(np.int64)


def embed(model: SanModel, x) -> np.ndarray:
    x = _as_input(model, x).detach()
    return model.extract(x).data


# ---------------------------------------------------------------------------
# checkpoints


def to_state(model: SanModel) -> tuple:
    meta = {
        "input_dim": model.input_dim,
        "hidden_dims": list(model.hidden_dims),
        "feature_dim": model.feature_dim,
        "num_classes": model.num_classes,
        "disc_hidden": model.disc_hidden,
        "seed": model.seed,
        "num_discriminators": len(model.discriminators),
        "dtype": str(model.head.w.data.dtype),
    }
    arrays = {name: np.array(t.data) for name, t, _ in model.named_parameters()}
    return meta, arrays


def from_state(meta: dict, arrays: dict) -> SanModel:
    model = build_model(
        meta["input_dim"],
        meta["hidden_dims"],
        meta["feature_dim"],
        meta["num_classes"],
        meta["disc_hidden"],
        meta["seed"],
        num_discriminators=meta["num_discriminators"],
        dtype=np.dtype(meta["dtype"]),
    )
    for name, t, _ in model.named_parameters():
        arr = np.asarray(arrays[name])
        if arr.shape != t.shape:
            raise ad.ShapeError(f"checkpoint array {name} has shape {arr.shape}, expected {t.shape}")
        t.data = _frozen(arr.astype(t.data.dtype, copy=True))
    return model


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def save_checkpoint(model: SanModel, path) -> Path:
    """Write an ``.npz`` holding a JSON header and one array per parameter."""
    path = Path(path)
    meta, arrays = to_state(model)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path) -> SanModel:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    return from_state(meta, arrays)
