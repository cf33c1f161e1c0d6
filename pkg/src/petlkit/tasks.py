"""Seeded synthetic downstream tasks.

Inputs are random sequences; labels come from a fixed random low-rank teacher
applied to the time-pooled input (classification/tagging) or from a planted
dominant periodicity (tempo). Regeneration with the same seed is bit-identical
and the three splits are disjoint by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import ValidationError
from .tensor import derive_seed

TAGGING = "tagging"
GENRE = "genre"
KEY = "key"
TEMPO = "tempo"

KINDS = (TAGGING, GENRE, KEY, TEMPO)

# Tonic/mode encoding for the 24 key classes: index = tonic + 12 * (mode == minor).
N_KEY_CLASSES = 24

# Planted-periodicity targets: bpm = TEMPO_BPM_SCALE / period_frames.
TEMPO_BPM_SCALE = 1200.0
TEMPO_MIN_PERIOD = 4.0


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    seq_len: int = 16
    d_input: int = 32
    n_train: int = 64
    n_val: int = 16
    n_test: int = 32
    seed: int = 0
    planted_rank: int = 4
    n_tags: int = 50
    n_classes: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError("task.kind", f"must be one of {KINDS}, got {self.kind!r}")
        for name in ("seq_len", "d_input", "n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ValidationError(f"task.{name}", f"must be >= 1, got {getattr(self, name)}")
        if self.planted_rank < 0:
            raise ValidationError("task.planted_rank", f"must be >= 0, got {self.planted_rank}")
        if self.kind == TAGGING and self.n_tags < 1:
            raise ValidationError("task.n_tags", f"must be >= 1, got {self.n_tags}")
        if self.kind == KEY and self.n_classes not in (None, N_KEY_CLASSES):
            raise ValidationError("task.n_classes", f"key task has {N_KEY_CLASSES} classes")
        if self.kind == GENRE and self.n_classes is not None and self.n_classes < 2:
            raise ValidationError("task.n_classes", f"must be >= 2, got {self.n_classes}")

    @property
    def n_outputs(self) -> int:
        if self.kind == TAGGING:
            return self.n_tags
        if self.kind == GENRE:
            return self.n_classes if self.n_classes is not None else 10
        if self.kind == KEY:
            return N_KEY_CLASSES
        return 1

    @property
    def output_kind(self) -> str:
        return "multilabel" if self.kind in (TAGGING, TEMPO) else "multiclass"

    @property
    def metric_name(self) -> str:
        return {
            TAGGING: "map",
            GENRE: "accuracy",
            KEY: "key_weighted_accuracy",
            TEMPO: "tempo_acc1",
        }[self.kind]


@dataclass
class Dataset:
    spec: TaskSpec
    splits: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    teacher: np.ndarray | None = None  # composed [d_input, n_outputs] label map
    feature_map: np.ndarray | None = None  # rank-k projection [d_input, planted_rank]

    def __getitem__(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        return self.splits[split]

    def teacher_features(self, split: str) -> np.ndarray:
        """Pooled inputs through the rank-k half of the teacher."""
        if self.feature_map is None:
            raise ValueError("task has no planted structure")
        return self[split][0].mean(axis=1) @ self.feature_map


def key_class_to_tonic_mode(index: int) -> tuple[int, str]:
    return index % 12, "major" if index < 12 else "minor"


def generate_task(spec: TaskSpec) -> Dataset:
    rng = np.random.default_rng(derive_seed(spec.seed, f"task.{spec.kind}"))
    n_total = spec.n_train + spec.n_val + spec.n_test
    t, d = spec.seq_len, spec.d_input

    teacher = feature_map = None
    if spec.kind == TEMPO:
        inputs = rng.normal(0.0, 0.25, (n_total, t, d)).astype(np.float32)
        if spec.planted_rank > 0:
            direction = rng.normal(0.0, 1.0, d)
            direction /= np.linalg.norm(direction)
            periods = rng.uniform(TEMPO_MIN_PERIOD, max(TEMPO_MIN_PERIOD + 1.0, t), n_total)
            phases = rng.uniform(0.0, 2.0 * np.pi, n_total)
            frames = np.arange(t)
            waves = np.sin(2.0 * np.pi * frames[None, :] / periods[:, None] + phases[:, None])
            inputs += (waves[:, :, None] * direction[None, None, :]).astype(np.float32)
            labels = (TEMPO_BPM_SCALE / periods).astype(np.float64)
        else:
            labels = rng.uniform(70.0, 200.0, n_total)
    else:
        inputs = rng.normal(0.0, 1.0, (n_total, t, d)).astype(np.float32)
        n_out = spec.n_outputs
        if spec.planted_rank > 0:
            feature_map = rng.normal(0.0, 1.0, (d, spec.planted_rank))
            v = rng.normal(0.0, 1.0, (spec.planted_rank, n_out))
            teacher = (feature_map @ v) / np.sqrt(spec.planted_rank)
            logits = inputs.mean(axis=1) @ teacher
            if spec.kind == TAGGING:
                labels = (logits > 0.0).astype(np.int64)
            else:
                labels = logits.argmax(axis=1).astype(np.int64)
        else:
            if spec.kind == TAGGING:
                labels = rng.integers(0, 2, (n_total, n_out)).astype(np.int64)
            else:
                labels = rng.integers(0, n_out, n_total).astype(np.int64)

    splits = {}
    bounds = {
        "train": (0, spec.n_train),
        "val": (spec.n_train, spec.n_train + spec.n_val),
        "test": (spec.n_train + spec.n_val, n_total),
    }
    for name, (lo, hi) in bounds.items():
        splits[name] = (inputs[lo:hi], labels[lo:hi])
    return Dataset(spec=spec, splits=splits, teacher=teacher, feature_map=feature_map)
