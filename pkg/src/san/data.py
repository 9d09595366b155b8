"""Synthetic partial-transfer tasks, CSV ingestion and mixed minibatching."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .losses import SOURCE, TARGET
from .model import ConfigError

DOMAINS = ("source", "target")


class DataError(ValueError):
    """Malformed dataset file or inconsistent dataset pair."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: Optional[np.ndarray]
    domain: str
    label_space: tuple = ()

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DataError(f"a dataset needs at least one row and one feature column, got shape {x.shape}")
        if self.domain not in DOMAINS:
            raise DataError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        x.setflags(write=False)
        object.__setattr__(self, "features", x)
        if self.labels is not None:
            y = np.array(self.labels, dtype=np.int64)
            if y.shape != (x.shape[0],):
                raise DataError(f"{x.shape[0]} rows but {y.shape} labels")
            if y.size and y.min() < 0:
                raise DataError("labels must be non-negative class indices")
            y.setflags(write=False)
            object.__setattr__(self, "labels", y)
            if not self.label_space:
                object.__setattr__(self, "label_space", tuple(int(c) for c in np.unique(y)))
        else:
            object.__setattr__(self, "label_space", tuple(int(c) for c in self.label_space))

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def without_labels(self) -> "Dataset":
        return Dataset(self.features, None, self.domain, self.label_space)


def check_partial_pair(source: Dataset, target: Dataset) -> None:
    if source.dim != target.dim:
        raise DataError(f"source has {source.dim} features, target has {target.dim}")
    if source.labels is None:
        raise DataError("source dataset must be labelled")
    if not set(target.label_space) <= set(source.label_space):
        extra = sorted(set(target.label_space) - set(source.label_space))
        raise DataError(f"target classes {extra} are missing from the source label space")


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass
class SyntheticSpec:
    num_source_classes: int = 10
    num_target_classes: int = 5
    dim: int = 2
    source_per_class: int = 100
    target_per_class: int = 100
    class_center_scale: float = 4.0
    rotation_angle: float = 30.0
    translation: Optional[tuple] = None
    noise_sigma: float = 0.3
    seed: int = 0
    min_center_distance: float = 6.0

    def __post_init__(self):
        if self.translation is not None:
            self.translation = tuple(float(t) for t in self.translation)

    def validate(self) -> None:
        if self.num_source_classes < 1 or self.num_target_classes < 1:
            raise ConfigError("class counts must be >= 1")
        if self.num_target_classes > self.num_source_classes:
            raise ConfigError(
                f"num_target_classes ({self.num_target_classes}) exceeds num_source_classes ({self.num_source_classes})"
            )
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if self.source_per_class < 1 or self.target_per_class < 1:
            raise ConfigError("samples per class must be >= 1")
        if not self.noise_sigma > 0:
            raise ConfigError(f"noise_sigma must be > 0, got {self.noise_sigma}")
        if self.translation is not None and len(self.translation) != self.dim:
            raise ConfigError(f"translation has {len(self.translation)} entries, dim is {self.dim}")

    def translation_vector(self) -> np.ndarray:
        """Default: magnitude 1 along the all-ones diagonal."""
        if self.translation is None:
            return np.full(self.dim, 1.0 / math.sqrt(self.dim))
        return np.asarray(self.translation, dtype=np.float64)

    def rotation_matrix(self) -> np.ndarray:
        """Rotation by ``rotation_angle`` degrees in the plane of the first two axes."""
        R = np.eye(self.dim)
        if self.dim >= 2:
            a = math.radians(self.rotation_angle)
            c, s = math.cos(a), math.sin(a)
            R[:2, :2] = [[c, -s], [s, c]]
        return R


def class_centers(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform centres in ``[-scale, scale]^d`` kept ``min_center_distance * sigma`` apart.

    Rejection sampling gives up on the spacing after a bounded number of
    tries so tight configurations still produce a task.
    """
    K, d = spec.num_source_classes, spec.dim
    s = spec.class_center_scale
    min_gap = spec.min_center_distance * spec.noise_sigma
    centers: list = []
    tries = 0
    while len(centers) < K:
        c = rng.uniform(-s, s, size=d)
        tries += 1
        if tries > 10000 or all(np.linalg.norm(c - o) >= min_gap for o in centers):
            centers.append(c)
    return np.array(centers)


def generate_synthetic(spec: SyntheticSpec) -> tuple:
    """Return ``(source, target, target_labels)``.

    Source holds all ``K_s`` Gaussian classes; target holds the first ``K_t``,
    with each class centre rotated and translated before noise is added.
    Target ground truth is returned separately and never attached to the
    target dataset.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    centers = class_centers(spec, rng)
    K_s, K_t, sig = spec.num_source_classes, spec.num_target_classes, spec.noise_sigma

    ys = np.repeat(np.arange(K_s), spec.source_per_class)
    xs = centers[ys] + sig * rng.standard_normal((ys.size, spec.dim))

    shifted = centers @ spec.rotation_matrix().T + spec.translation_vector()
    yt = np.repeat(np.arange(K_t), spec.target_per_class)
    xt = shifted[yt] + sig * rng.standard_normal((yt.size, spec.dim))

    source = Dataset(xs, ys, "source", tuple(range(K_s)))
    target = Dataset(xt, None, "target", tuple(range(K_t)))
    return source, target, yt


# ---------------------------------------------------------------------------
# CSV


@dataclass
class CsvSchema:
    has_header: bool = False
    has_label: bool = True
    domain: str = "source"


def load_csv(path, schema: Optional[CsvSchema] = None) -> Dataset:
    """Parse ``d`` float columns plus an optional trailing integer label.

    Errors carry the 1-based line number. Row order is preserved.
    """
    schema = schema or CsvSchema()
    raw = Path(path).read_bytes().decode("utf-8")
    reader = csv.reader(io.StringIO(raw, newline=""))
    feats: list = []
    labels: list = []
    width = None
    for lineno, row in enumerate(reader, start=1):
        if lineno == 1 and schema.has_header:
            continue
        if not row or all(not c.strip() for c in row):
            continue
        if width is None:
            width = len(row)
            if schema.has_label and width < 2:
                raise DataError(f"line {lineno}: need at least one feature column and a label")
        elif len(row) != width:
            raise DataError(f"line {lineno}: expected {width} columns, found {len(row)}")
        cells = [c.strip() for c in row]
        value_cells = cells[:-1] if schema.has_label else cells
        try:
            values = [float(c) for c in value_cells]
        except ValueError:
            raise DataError(f"line {lineno}: non-numeric feature value in {row!r}") from None
        if not all(math.isfinite(v) for v in values):
            raise DataError(f"line {lineno}: non-finite feature value")
        feats.append(values)
        if schema.has_label:
            try:
                lab = int(cells[-1])
            except ValueError:
                raise DataError(f"line {lineno}: label {cells[-1]!r} is not an integer") from None
            if lab < 0:
                raise DataError(f"line {lineno}: negative label {lab}")
            labels.append(lab)
    if not feats:
        raise DataError(f"{path}: no data rows")
    return Dataset(np.array(feats), np.array(labels) if schema.has_label else None, schema.domain)


def write_csv(path, features: np.ndarray, labels=None, header: Optional[Sequence[str]] = None) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(header)
        for i, row in enumerate(np.asarray(features)):
            cells = [repr(float(v)) for v in row]
            if labels is not None:
                cells.append(str(int(labels[i])))
            w.writerow(cells)
    return path


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    m_s: int
    m_t: int
    source_index: np.ndarray = field(repr=False, default=None)
    target_index: np.ndarray = field(repr=False, default=None)

    @property
    def m(self) -> int:
        return self.m_s + self.m_t


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, int(epoch)])


def _tiled(perm: np.ndarray, n: int) -> np.ndarray:
    reps = -(-n // perm.size)
    return np.tile(perm, reps)[:n]


def make_batches(source: Dataset, target: Dataset, batch_size: int, seed: int, epoch: int) -> list:
    """One epoch of half-source / half-target batches.

    The longer domain is traversed once in a shuffled order (wrapping to fill
    the final batch); the shorter one is cycled so every batch is mixed. For
    odd ``batch_size`` the extra row goes to the source half.
    """
    if batch_size < 2:
        raise ConfigError(f"batch_size must be >= 2, got {batch_size}")
    if len(source) == 0 or len(target) == 0:
        raise DataError("both datasets must be non-empty")
    if source.labels is None:
        raise DataError("source dataset must be labelled")
    m_t = batch_size // 2
    m_s = batch_size - m_t
    rng = epoch_rng(seed, epoch)
    perm_s = rng.permutation(len(source))
    perm_t = rng.permutation(len(target))
    n_batches = max(-(-len(source) // m_s), -(-len(target) // m_t))
    idx_s = _tiled(perm_s, n_batches * m_s).reshape(n_batches, m_s)
    idx_t = _tiled(perm_t, n_batches * m_t).reshape(n_batches, m_t)
    d = np.concatenate([np.full(m_s, SOURCE), np.full(m_t, TARGET)]).astype(np.int64)
    batches = []
    for b in range(n_batches):
        s_i, t_i = idx_s[b], idx_t[b]
        x = np.concatenate([source.features[s_i], target.features[t_i]])
        batches.append(Batch(x, source.labels[s_i], d, m_s, m_t, s_i, t_i))
    return batches


def batch_stream(source: Dataset, target: Dataset, batch_size: int, seed: int) -> Iterator:
    """Endless ``(epoch, batch)`` stream; each epoch reshuffles from ``(seed, epoch)``."""
    epoch = 0
    while True:
        for b in make_batches(source, target, batch_size, seed, epoch):
            yield epoch, b
        epoch += 1
