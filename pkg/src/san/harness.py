"""Training loop, evaluation, target-class sweeps and embedding export."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tape
from .config import ExperimentConfig, dump_config
from .data import CsvSchema, Dataset, batch_stream, check_partial_pair, generate_synthetic, load_csv
from .model import SanModel, build_model, embed, forward, predict, predict_proba, save_checkpoint
from .optim import OptState, TrainConfig, lambda_schedule, lr_schedule, progress, sgd_momentum_step

log = logging.getLogger(__name__)

ADVERSARIAL = ("SAN", "SAN_entropy", "SAN_selective", "DANN")
SELECTIVE = ("SAN", "SAN_entropy")
WITH_ENTROPY = ("SAN", "SAN_selective")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, record: "MetricsRecord"):
        super().__init__(message)
        self.record = record


def num_discriminators(variant: str, K: int) -> int:
    if variant in SELECTIVE:
        return K
    if variant in ADVERSARIAL:
        return 1
    return 0


def effective_entropy_coef(cfg: TrainConfig) -> float:
    return cfg.entropy_coef if cfg.variant in WITH_ENTROPY else 0.0


# ---------------------------------------------------------------------------
# one step


@dataclass
class StepResult:
    breakdown: L.LossBreakdown
    weights: L.ClassWeightState
    opt: OptState
    class_probs: np.ndarray
    grads: dict = field(repr=False, default_factory=dict)


def compute_losses(model: SanModel, batch, weights: L.ClassWeightState, cfg: TrainConfig, lam: float, tape: Tape):
    """Forward one batch and assemble the variant's objective.

    Returns ``(surrogate, breakdown, new_weights, class_probs)``. Class
    weights are refreshed from this batch's target rows (EMA mode) before
    they enter the domain loss.
    """
    adversarial = cfg.variant in ADVERSARIAL
    out = forward(model, batch.x, lam if adversarial else 0.0, tape)
    with tape:
        probs = out.class_probs
        src = ad.rows(probs, np.arange(batch.m_s))
        tgt = ad.rows(probs, np.arange(batch.m_s, batch.m))
        label = L.label_loss(src, batch.y)
        entropy = L.entropy_loss(tgt)
        if cfg.weight_mode == L.PER_BATCH_EMA:
            weights = L.class_weights(tgt.data, weights)

        if cfg.variant in SELECTIVE:
            inst = probs if not cfg.detach_weights else probs.data
            per_class = L.instance_weighted_domain_loss(out.domain_probs, inst, batch.d)
            w = L.rescale_weights(weights.weights, cfg.class_weight_norm)
        elif adversarial:
            per_class = [L.unweighted_domain_loss(out.domain_probs[0], batch.d)]
            w = np.ones(1)
        else:
            per_class, w = [], np.zeros(0)
        surrogate, breakdown = L.san_objective(
            label, entropy, per_class, w, lam if adversarial else 0.0, effective_entropy_coef(cfg)
        )
    return surrogate, breakdown, weights, probs.data


def train_step(
    model: SanModel,
    batch,
    weights: L.ClassWeightState,
    opt: OptState,
    cfg: TrainConfig,
    lr: float,
    lam: float,
) -> StepResult:
    tape = Tape()
    surrogate, breakdown, weights, probs = compute_losses(model, batch, weights, cfg, lam, tape)
    grads = ad.backward(surrogate, tape)
    named = list(model.named_parameters())
    params = [t for _, t, _ in named]
    opt = sgd_momentum_step(params, [grads.get(p) for p in params], opt, lr, cfg, [n for _, _, n in named])
    return StepResult(breakdown, weights, opt, probs, grads)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: SanModel, x, labels) -> tuple:
    """``(accuracy, per_class)``; per-class entries are NaN for classes absent from ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("evaluation set is empty")
    pred = predict(model, x)
    return accuracy_from_predictions(pred, labels, model.num_classes)


def accuracy_from_predictions(pred, labels, K: int) -> tuple:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("evaluation set is empty")
    correct = pred == labels
    per_class = np.full(K, np.nan)
    for k in range(K):
        mask = labels == k
        if mask.any():
            per_class[k] = correct[mask].mean()
    return float(correct.mean()), per_class


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRecord:
    step: int
    p: float
    lr: float
    lam: float
    label_loss: float
    entropy_loss: float
    domain_loss: float
    total_loss: float
    target_accuracy: float
    per_class_accuracy: list
    class_weights: list
    wall_clock_ms: float
    max_row_sum_error: float = 0.0

    @property
    def target_error(self) -> float:
        return 1.0 - self.target_accuracy


def metrics_header(K: int) -> list:
    return (
        ["step", "p", "lr", "lambda", "label_loss", "entropy_loss", "domain_loss", "total_loss", "target_accuracy"]
        + [f"pc_acc_{k}" for k in range(K)]
        + [f"w_{k}" for k in range(K)]
        + ["wall_clock_ms"]
    )


def _num(v: float) -> str:
    return repr(float(v))


def metrics_row(r: MetricsRecord, log_wall_clock: bool) -> list:
    return (
        [str(r.step), _num(r.p), _num(r.lr), _num(r.lam), _num(r.label_loss), _num(r.entropy_loss)]
        + [_num(r.domain_loss), _num(r.total_loss), _num(r.target_accuracy)]
        + [_num(v) for v in r.per_class_accuracy]
        + [_num(v) for v in r.class_weights]
        + [_num(round(r.wall_clock_ms, 3)) if log_wall_clock else "0"]
    )


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# experiment


@dataclass
class Task:
    source: Dataset
    target: Dataset
    target_labels: Optional[np.ndarray]

    @property
    def K(self) -> int:
        return max(self.source.label_space) + 1


def load_task(cfg: ExperimentConfig) -> Task:
    if cfg.source_csv is not None:
        source = load_csv(cfg.source_csv, CsvSchema(cfg.csv_header, True, "source"))
        tgt = load_csv(cfg.target_csv, CsvSchema(cfg.csv_header, cfg.target_csv_labelled, "target"))
        labels = tgt.labels
        target = tgt.without_labels()
        if labels is not None:
            target = Dataset(target.features, None, "target", tuple(int(c) for c in np.unique(labels)))
        task = Task(source, target, labels)
    else:
        source, target, labels = generate_synthetic(cfg.synthetic_spec())
        task = Task(source, target, labels)
    check_partial_pair(task.source, task.target)
    return task


@dataclass
class RunResult:
    model: SanModel
    records: list
    weights: L.ClassWeightState
    final: MetricsRecord
    output_dir: Optional[Path] = None


def _record(step, p, lr, lam, bd, K, acc, pc, weights, t0, probs) -> MetricsRecord:
    row_err = float(np.max(np.abs(probs.sum(axis=1) - 1.0))) if probs.size else 0.0
    return MetricsRecord(
        step=step,
        p=p,
        lr=lr,
        lam=lam,
        label_loss=bd.label_loss,
        entropy_loss=bd.entropy_loss,
        domain_loss=bd.domain_loss,
        total_loss=bd.total,
        target_accuracy=acc,
        per_class_accuracy=[float(v) for v in pc],
        class_weights=[float(v) for v in weights.weights],
        wall_clock_ms=(time.perf_counter() - t0) * 1000.0,
        max_row_sum_error=row_err,
    )


def train(
    cfg: ExperimentConfig,
    task: Task,
    on_record: Optional[Callable[[MetricsRecord], None]] = None,
) -> RunResult:
    """Run ``total_steps`` updates of the configured variant.

    Target labels in ``task`` are used only to score the model at logging
    steps. Raises :class:`TrainingDiverged` on a non-finite loss.
    """
    tc = cfg.train
    tc.validate()
    K = task.K
    dtype = np.dtype(tc.dtype)
    model = build_model(
        task.source.dim, tc.hidden_dims, tc.feature_dim, K, tc.disc_hidden, tc.seed,
        num_discriminators=num_discriminators(tc.variant, K), dtype=dtype,
    )
    opt = OptState.for_params(model.parameters())
    weights = L.ClassWeightState.uniform(K, tc.ema_decay, tc.weight_mode)
    stream = batch_stream(task.source, task.target, tc.batch_size, tc.seed)
    target_x = task.target.features.astype(dtype)
    records: list = []
    t0 = time.perf_counter()
    last_epoch = -1
    final = None

    for step in range(tc.total_steps):
        epoch, batch = next(stream)
        if tc.weight_mode == L.FULL_TARGET_RECOMPUTE and epoch != last_epoch:
            weights = L.class_weights(predict_proba(model, target_x), weights)
        last_epoch = epoch
        p = progress(step, tc.total_steps)
        lr = lr_schedule(p, tc)
        lam = lambda_schedule(p, tc) if tc.variant in ADVERSARIAL else 0.0
        if batch.x.dtype != dtype:
            batch = dataclasses.replace(batch, x=batch.x.astype(dtype))
        res = train_step(model, batch, weights, opt, tc, lr, lam)
        weights, opt = res.weights, res.opt
        bd = res.breakdown

        finite = all(math.isfinite(v) for v in (bd.label_loss, bd.entropy_loss, bd.domain_loss, bd.total))
        last = step == tc.total_steps - 1
        if not finite or (step + 1) % cfg.eval_every == 0 or last:
            if task.target_labels is not None:
                acc, pc = evaluate(model, target_x, task.target_labels)
            else:
                acc, pc = float("nan"), np.full(K, np.nan)
            rec = _record(step, p, lr, lam, bd, K, acc, pc, weights, t0, res.class_probs)
            records.append(rec)
            if on_record is not None:
                on_record(rec)
            final = rec
            if not finite:
                raise TrainingDiverged(f"non-finite loss at step {step}: {bd}", rec)
    return RunResult(model, records, weights, final)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunResult:
    """Train from config and write ``metrics.csv``, ``checkpoint.npz``, ``config.txt``
    and ``summary.json`` (plus ``embeddings.csv`` when requested) to the output dir."""
    cfg.validate()
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    task = load_task(cfg)
    K = task.K
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(metrics_header(K))

        def sink(rec):
            writer.writerow(metrics_row(rec, cfg.log_wall_clock))
            fh.flush()

        try:
            result = train(cfg, task, sink)
        except TrainingDiverged as exc:
            _write_summary(out / "summary.json", cfg, exc.record, status="diverged", message=str(exc))
            raise
    save_checkpoint(result.model, out / "checkpoint.npz")
    if cfg.export_embeddings:
        export_embeddings(result.model, task, out / "embeddings.csv")
    _write_summary(out / "summary.json", cfg, result.final, status="ok")
    result.output_dir = out
    return result


def _write_summary(path: Path, cfg: ExperimentConfig, rec: MetricsRecord, status: str, message: str = "") -> None:
    body = {
        "status": status,
        "variant": cfg.train.variant,
        "seed": cfg.train.seed,
        "num_target_classes": cfg.data.num_target_classes if cfg.source_csv is None else None,
        "message": message,
        "final": None if rec is None else _jsonable(dataclasses.asdict(rec)),
    }
    if not cfg.log_wall_clock and body["final"] is not None:
        body["final"]["wall_clock_ms"] = 0
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


# ---------------------------------------------------------------------------
# embeddings


def export_embeddings(model: SanModel, task: Task, path) -> Path:
    """Write one row per source and target sample: features, label, domain, prediction.

    The label cell is blank where ground truth is unknown.
    """
    path = Path(path)
    header = [f"f_{j}" for j in range(model.feature_dim)] + ["label", "domain", "predicted"]
    dtype = model.head.w.data.dtype
    parts = [
        (task.source.features, task.source.labels, "source"),
        (task.target.features, task.target_labels, "target"),
    ]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for x, y, dom in parts:
            x = x.astype(dtype)
            feats = embed(model, x)
            pred = predict(model, x)
            for i in range(x.shape[0]):
                label = "" if y is None else str(int(y[i]))
                w.writerow([repr(float(v)) for v in feats[i]] + [label, dom, str(int(pred[i]))])
    return path


# ---------------------------------------------------------------------------
# sweeps

SWEEP_HEADER = ["num_target_classes", "variant", "seed", "final_accuracy", "status"]


@dataclass
class SweepRow:
    num_target_classes: int
    variant: str
    seed: int
    final_accuracy: float
    status: str = "ok"


@dataclass
class SweepResult:
    rows: list

    def mean_accuracy(self, count: int, variant: str) -> float:
        vals = [r.final_accuracy for r in self.rows
                if r.num_target_classes == count and r.variant == variant and r.status == "ok"]
        return float(np.mean(vals)) if vals else float("nan")


def _cell_config(base: ExperimentConfig, count: int, variant: str, seed: int) -> ExperimentConfig:
    cfg = base.with_overrides(num_target_classes=count, variant=variant, seed=seed)
    return cfg


def _cell_dir(out: Path, count: int, variant: str, seed: int) -> Path:
    return out / "cells" / f"kt{count}_{variant}_seed{seed}"


def _run_cell(args) -> SweepRow:
    cfg, count, variant, seed, cell_dir = args
    try:
        result = run_experiment(cfg, cell_dir)
        return SweepRow(count, variant, seed, result.final.target_accuracy, "ok")
    except Exception as exc:  # recorded per cell; the sweep carries on
        log.warning("sweep cell (%s, %s, %s) failed: %s", count, variant, seed, exc)
        return SweepRow(count, variant, seed, float("nan"), f"error: {type(exc).__name__}: {exc}".replace("\n", " "))


def read_sweep(path) -> list:
    path = Path(path)
    if not path.exists():
        return []
    rows = []
    with open(path, newline="") as fh:
        for d in csv.DictReader(fh):
            rows.append(SweepRow(int(d["num_target_classes"]), d["variant"], int(d["seed"]),
                                 float(d["final_accuracy"]), d["status"]))
    return rows


def sweep_target_classes(
    base: ExperimentConfig,
    class_counts: Sequence[int],
    variants: Sequence[str],
    seeds: Sequence[int],
    out_dir=None,
    jobs: int = 1,
) -> SweepResult:
    """Train every ``(count, variant, seed)`` cell and collect final target accuracy.

    ``sweep.csv`` under the output dir is append-only: cells already present
    are not rerun. Cells may run in worker processes; only this function
    writes the CSV.
    """
    out = Path(out_dir or base.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    K_s = base.data.num_source_classes
    for c in class_counts:
        if not 1 <= c <= K_s:
            raise ValueError(f"target class count {c} outside [1, {K_s}]")
    csv_path = out / "sweep.csv"
    existing = read_sweep(csv_path)
    done = {(r.num_target_classes, r.variant, r.seed) for r in existing}
    todo = []
    for count in class_counts:
        for variant in variants:
            for seed in seeds:
                if (count, variant, seed) in done:
                    continue
                cfg = _cell_config(base, count, variant, seed)
                todo.append((cfg, count, variant, seed, _cell_dir(out, count, variant, seed)))

    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            new_rows = list(pool.map(_run_cell, todo))
    else:
        new_rows = [_run_cell(t) for t in todo]

    fresh = not csv_path.exists()
    with open(csv_path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if fresh:
            w.writerow(SWEEP_HEADER)
        for r in new_rows:
            w.writerow([r.num_target_classes, r.variant, r.seed, _num(r.final_accuracy), r.status])

    wanted = {(c, v, s) for c in class_counts for v in variants for s in seeds}
    rows = [r for r in existing + new_rows if (r.num_target_classes, r.variant, r.seed) in wanted]
    rows.sort(key=lambda r: (list(class_counts).index(r.num_target_classes), list(variants).index(r.variant),
                             list(seeds).index(r.seed)))
    return SweepResult(rows)
