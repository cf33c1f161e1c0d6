"""Evaluation metrics and bootstrap confidence intervals.

All metrics return values in [0, 1] and are invariant to permuting the
(prediction, label) pairs.
"""

from __future__ import annotations

import numpy as np

MAJOR = "major"
MINOR = "minor"

# Partial-credit weights adopted from the standard key-evaluation convention:
# exact 1.0, perfect fifth (same mode, estimate a fifth above) 0.5,
# relative major/minor 0.3, parallel (same tonic, other mode) 0.2.
FIFTH_SCORE = 0.5
RELATIVE_SCORE = 0.3
PARALLEL_SCORE = 0.2


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """AP for one tag: mean precision at the rank of each positive."""
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    positives = ranked.nonzero()[0]
    if positives.size == 0:
        raise ValueError("average_precision needs at least one positive")
    hits = np.arange(1, positives.size + 1)
    return float(np.mean(hits / (positives + 1)))


def map_metric(scores: np.ndarray, labels: np.ndarray) -> float:
    """Macro mean average precision over tags; zero-positive tags are excluded."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise ValueError(f"expected matching [n, n_tags] arrays, got {scores.shape} vs {labels.shape}")
    aps = [
        average_precision(scores[:, t], labels[:, t])
        for t in range(labels.shape[1])
        if labels[:, t].any()
    ]
    if not aps:
        raise ValueError("no tag has a positive example")
    return float(np.mean(aps))


def key_score(pred: tuple[int, str], true: tuple[int, str]) -> float:
    """Partial-credit score for one key estimate."""
    pred_tonic, pred_mode = pred
    true_tonic, true_mode = true
    for tonic, mode in (pred, true):
        if not 0 <= tonic <= 11 or mode not in (MAJOR, MINOR):
            raise ValueError(f"invalid key ({tonic}, {mode!r})")
    if pred == true:
        return 1.0
    if pred_mode == true_mode and (pred_tonic - true_tonic) % 12 == 7:
        return FIFTH_SCORE
    if pred_mode != true_mode:
        if true_mode == MAJOR and (pred_tonic - true_tonic) % 12 == 9:
            return RELATIVE_SCORE
        if true_mode == MINOR and (pred_tonic - true_tonic) % 12 == 3:
            return RELATIVE_SCORE
        if pred_tonic == true_tonic:
            return PARALLEL_SCORE
    return 0.0


def key_weighted_accuracy(pred_keys, true_keys) -> float:
    scores = key_scores(pred_keys, true_keys)
    return float(np.mean(scores))


def key_scores(pred_keys, true_keys) -> np.ndarray:
    if len(pred_keys) != len(true_keys):
        raise ValueError("prediction/label length mismatch")
    return np.array([key_score(p, t) for p, t in zip(pred_keys, true_keys)], dtype=np.float64)


def tempo_scores(pred_bpm, true_bpm, tolerance: float = 0.04) -> np.ndarray:
    """Per-example 0/1: correct when relative error <= tolerance (inclusive)."""
    pred = np.asarray(pred_bpm, dtype=np.float64)
    true = np.asarray(true_bpm, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError("prediction/label length mismatch")
    if np.any(true <= 0):
        raise ValueError("ground-truth tempo must be positive")
    return (np.abs(pred - true) / true <= tolerance).astype(np.float64)


def tempo_acc1(pred_bpm, true_bpm) -> float:
    return float(np.mean(tempo_scores(pred_bpm, true_bpm)))


def accuracy_scores(pred_labels, true_labels) -> np.ndarray:
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape:
        raise ValueError("prediction/label length mismatch")
    return (pred == true).astype(np.float64)


def bootstrap_ci(
    per_example_scores: np.ndarray,
    b: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    statistic=None,
) -> tuple[float, float]:
    """Seeded percentile bootstrap over example resamples.

    `per_example_scores` is indexed by example along axis 0. The default
    statistic is the mean of a 1-D score vector; set-level metrics (mAP)
    pass a statistic that recomputes the metric on each resample.
    """
    scores = np.asarray(per_example_scores)
    n = scores.shape[0]
    if n < 2:
        raise ValueError(f"bootstrap needs at least 2 examples, got {n}")
    if statistic is None:
        statistic = lambda s: float(np.mean(s))
    rng = np.random.default_rng(seed)
    stats = np.empty(b, dtype=np.float64)
    for i in range(b):
        idx = rng.integers(0, n, size=n)
        stats[i] = statistic(scores[idx])
    alpha = (1.0 - level) / 2.0
    low, high = np.percentile(stats, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return float(low), float(high)
