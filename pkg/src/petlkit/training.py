"""Training loop, task losses, evaluation, and the timing probe."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import reduce

import numpy as np

from .backbone import ValidationError
from .metrics import (
    accuracy_scores,
    bootstrap_ci,
    key_scores,
    map_metric,
    tempo_scores,
)
from .optim import AdamW
from .petl import AdaptedModel, FullFinetune, method_name
from .tasks import GENRE, KEY, TAGGING, Dataset, TaskSpec, key_class_to_tonic_mode
from .tensor import Tensor, backward, derive_seed, log_softmax, sigmoid_cross_entropy


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    lr_petl: float = 1e-3
    lr_head: float = 1e-3
    lr_ft: float = 1e-5
    weight_decay: float = 1e-2
    eval_every: int = 100
    seed: int = 0
    early_stop_patience: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("train.steps", f"must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValidationError("train.batch_size", f"must be >= 1, got {self.batch_size}")
        for name in ("lr_petl", "lr_head", "lr_ft"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"train.{name}", f"must be > 0, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ValidationError("train.weight_decay", f"must be >= 0, got {self.weight_decay}")
        if self.eval_every < 1:
            raise ValidationError("train.eval_every", f"must be >= 1, got {self.eval_every}")
        if self.early_stop_patience < 0:
            raise ValidationError("train.early_stop_patience", f"must be >= 0, got {self.early_stop_patience}")


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    eval_steps: list[int] = field(default_factory=list)
    eval_values: list[float] = field(default_factory=list)
    initial_loss: float = 0.0
    final_loss: float = 0.0
    steps_run: int = 0


@dataclass
class EvalResult:
    """Metric value with bootstrap interval.

    per_example_scores is the example-indexed data the bootstrap resamples:
    a score vector for pointwise metrics, or [scores | labels] rows for mAP
    (which has no per-example decomposition and is recomputed per resample).
    """

    metric_name: str
    value: float
    per_example_scores: np.ndarray
    ci_low: float = 0.0
    ci_high: float = 0.0


def example_loss(model: AdaptedModel, x: np.ndarray, y, task: TaskSpec, training: bool, rng) -> Tensor:
    logits = model.forward(x, training=training, rng=rng)
    if task.kind == TAGGING:
        return sigmoid_cross_entropy(logits, y).mean()
    if task.kind in (GENRE, KEY):
        return -log_softmax(logits)[int(y)]
    # tempo: squared error on log-bpm
    target = float(np.log(y))
    diff = logits[0] - target
    return diff * diff


def batch_loss(model, xs, ys, task, training: bool = True, rng=None) -> Tensor:
    losses = [example_loss(model, xs[i], ys[i], task, training, rng) for i in range(len(xs))]
    return reduce(lambda a, b: a + b, losses) * (1.0 / len(losses))


def dataset_loss(model, dataset: Dataset, split: str = "train") -> float:
    """Eval-mode mean loss over one split (no dropout, no graph reuse)."""
    xs, ys = dataset[split]
    return float(batch_loss(model, xs, ys, dataset.spec, training=False).data)


def optimizer_for(model: AdaptedModel, cfg: TrainConfig) -> AdamW:
    """Group learning rates: head, injected/bias set, full-finetune backbone."""
    base_lr = cfg.lr_ft if isinstance(model.method, FullFinetune) else cfg.lr_petl
    groups = []
    injected = [p for p in model.injected.values() if p.trainable]
    if injected:
        groups.append((injected, cfg.lr_petl))
    base_trainable = [p for _, p in model.base.registry.items() if p.trainable]
    if base_trainable:
        groups.append((base_trainable, base_lr))
    if model.head is not None:
        groups.append((list(model.head.registry.values()), cfg.lr_head))
    return AdamW(groups, weight_decay=cfg.weight_decay)


def train(model: AdaptedModel, dataset: Dataset, cfg: TrainConfig) -> TrainHistory:
    """Step-based loop with seeded batches and dropout; deterministic per seed."""
    task = dataset.spec
    xs, ys = dataset["train"]
    opt = optimizer_for(model, cfg)
    batch_rng = np.random.default_rng(derive_seed(cfg.seed, "batches"))
    drop_rng = np.random.default_rng(derive_seed(cfg.seed, "dropout"))

    history = TrainHistory()
    history.initial_loss = dataset_loss(model, dataset, "train")
    best_val = -np.inf
    stale = 0
    for step in range(cfg.steps):
        idx = batch_rng.integers(0, len(xs), size=cfg.batch_size)
        loss = batch_loss(model, xs[idx], [ys[i] for i in idx], task, training=True, rng=drop_rng)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDivergedError(
                f"non-finite loss {value} at step {step} "
                f"({method_name(model.method)}, lr_petl={cfg.lr_petl})"
            )
        backward(loss)
        opt.step()
        history.losses.append(value)
        history.steps_run = step + 1
        if (step + 1) % cfg.eval_every == 0 or step == cfg.steps - 1:
            result = evaluate(model, dataset, split="val", bootstrap_samples=0)
            history.eval_steps.append(step + 1)
            history.eval_values.append(result.value)
            if cfg.early_stop_patience > 0:
                if result.value > best_val:
                    best_val = result.value
                    stale = 0
                else:
                    stale += 1
                    if stale >= cfg.early_stop_patience:
                        break
    history.final_loss = dataset_loss(model, dataset, "train")
    return history


def predict(model: AdaptedModel, xs: np.ndarray, task: TaskSpec) -> np.ndarray:
    """Eval-mode predictions in each task's native space."""
    outputs = []
    for i in range(len(xs)):
        logits = model.forward(xs[i], training=False).data
        if task.kind == TAGGING:
            outputs.append(1.0 / (1.0 + np.exp(-logits)))
        elif task.kind in (GENRE, KEY):
            outputs.append(int(np.argmax(logits)))
        else:
            outputs.append(float(np.exp(logits[0])))
    return np.asarray(outputs)


def evaluate(
    model: AdaptedModel,
    dataset: Dataset,
    split: str = "test",
    bootstrap_samples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> EvalResult:
    """Task metric on one split, with a percentile-bootstrap interval."""
    task = dataset.spec
    xs, ys = dataset[split]
    preds = predict(model, xs, task)

    if task.kind == TAGGING:
        labels = np.asarray(ys)
        value = map_metric(preds, labels)
        per_example = np.concatenate([preds, labels.astype(np.float64)], axis=1)
        n_tags = labels.shape[1]

        def statistic(rows):
            return map_metric(rows[:, :n_tags], rows[:, n_tags:])

    else:
        if task.kind == GENRE:
            per_example = accuracy_scores(preds, ys)
        elif task.kind == KEY:
            pred_keys = [key_class_to_tonic_mode(int(p)) for p in preds]
            true_keys = [key_class_to_tonic_mode(int(t)) for t in ys]
            per_example = key_scores(pred_keys, true_keys)
        else:
            per_example = tempo_scores(preds, ys)
        value = float(np.mean(per_example))
        statistic = None

    result = EvalResult(metric_name=task.metric_name, value=value, per_example_scores=per_example)
    if bootstrap_samples > 0:
        result.ci_low, result.ci_high = bootstrap_ci(
            per_example, b=bootstrap_samples, level=level, seed=seed, statistic=statistic
        )
    else:
        result.ci_low = result.ci_high = value
    return result


def timing_probe(
    model: AdaptedModel,
    dataset: Dataset,
    cfg: TrainConfig,
    reps: int = 20,
    clock=time.perf_counter,
) -> tuple[float, float]:
    """Median wall-clock (train ms/step, infer ms/example) over >= 20 repetitions.

    The probe optimizer runs with zero learning rate so measured steps carry
    the real update cost without changing any parameter value.
    """
    task = dataset.spec
    xs, ys = dataset["train"]
    batch = min(cfg.batch_size, len(xs))
    groups = []
    injected = [p for p in model.injected.values() if p.trainable]
    if injected:
        groups.append((injected, 0.0))
    base_trainable = [p for _, p in model.base.registry.items() if p.trainable]
    if base_trainable:
        groups.append((base_trainable, 0.0))
    if model.head is not None:
        groups.append((list(model.head.registry.values()), 0.0))
    opt = AdamW(groups, weight_decay=0.0)
    drop_rng = np.random.default_rng(0)

    # warm-up
    loss = batch_loss(model, xs[:batch], ys[:batch], task, training=True, rng=drop_rng)
    backward(loss)
    opt.step()

    train_times = []
    for _ in range(reps):
        t0 = clock()
        loss = batch_loss(model, xs[:batch], ys[:batch], task, training=True, rng=drop_rng)
        backward(loss)
        opt.step()
        train_times.append((clock() - t0) * 1000.0)

    infer_times = []
    for _ in range(reps):
        t0 = clock()
        model.forward(xs[0], training=False)
        infer_times.append((clock() - t0) * 1000.0)

    return float(np.median(train_times)), float(np.median(infer_times))
