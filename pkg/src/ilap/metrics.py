"""Detection and incremental-learning metrics.

Novelty detection is scored as a binary problem with novel exposures as
the positive class and the convention that an exposure is predicted
novel when its score is >= a threshold. All three detection metrics are
rank-based, so any strictly monotone transform of the scores leaves
them unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class ScoredStream:
    """Per-exposure novelty scores paired with ground-truth novelty."""

    scores: np.ndarray
    is_novel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))
        object.__setattr__(self, "is_novel", np.asarray(self.is_novel, dtype=bool))
        if self.scores.shape != self.is_novel.shape:
            raise ValueError("scores and is_novel must have equal length")

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        return self.scores[self.is_novel], self.scores[~self.is_novel]


def _check_both_classes(stream: ScoredStream):
    pos, neg = stream.split()
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("need at least one novel and one non-novel exposure")
    return pos, neg


def fpr_at_95_tpr(stream: ScoredStream) -> float:
    """False-positive rate at the operating point where the true-positive
    rate first reaches 0.95 (the minimum FPR subject to TPR >= 0.95)."""
    pos, neg = _check_both_classes(stream)
    pos_sorted = np.sort(pos)
    neg_sorted = np.sort(neg)
    best = 1.0
    for t in np.unique(stream.scores):
        tpr = 1.0 - np.searchsorted(pos_sorted, t, side="left") / len(pos)
        if tpr >= 0.95:
            fpr = 1.0 - np.searchsorted(neg_sorted, t, side="left") / len(neg)
            best = min(best, fpr)
    return float(best)


def auroc(stream: ScoredStream) -> float:
    """P(score of a novel exposure > score of a non-novel one), counting
    ties as one half; computed from midranks."""
    pos, neg = _check_both_classes(stream)
    ranks = rankdata(stream.scores)
    u = ranks[stream.is_novel].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def aupr(stream: ScoredStream) -> float:
    """Area under precision-recall with step interpolation, novel as the
    positive class."""
    pos, _ = stream.split()
    if len(pos) == 0:
        raise ValueError("need at least one novel exposure")
    order = np.argsort(-stream.scores, kind="stable")
    labels = stream.is_novel[order]
    scores = stream.scores[order]
    tp = np.cumsum(labels)
    predicted = np.arange(1, len(labels) + 1)
    # operating points at distinct score values only (ties share a point)
    boundary = np.flatnonzero(np.diff(scores, append=-np.inf))
    precision = tp[boundary] / predicted[boundary]
    recall = tp[boundary] / len(pos)
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


# ---------------------------------------------------------------------------
# Learner-label -> ground-truth-class mapping and mapped accuracy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelMap:
    """Mapping from learner labels to ground-truth classes, with the
    derived inverse from class to the set of learner labels."""

    label_to_class: dict[int, int]
    inverse: dict[int, tuple[int, ...]] = field(init=False)

    def __post_init__(self):
        inv: dict[int, list[int]] = {}
        for label, cls in self.label_to_class.items():
            inv.setdefault(cls, []).append(label)
        object.__setattr__(
            self, "inverse", {c: tuple(sorted(ls)) for c, ls in inv.items()}
        )


def build_label_map(
    assignments: list[tuple[int, int]], active_labels: set[int] | None = None
) -> LabelMap:
    """Derive the label map from a completed run.

    `assignments` lists (assigned_label, hidden_class) per exposure in
    stream order. Each active label maps to the majority hidden class
    among its exposures; ties go to the class assigned to it earliest.
    Labels outside `active_labels` (e.g. discarded ones) are excluded.
    """
    per_label: dict[int, list[int]] = {}
    for label, cls in assignments:
        per_label.setdefault(label, []).append(cls)
    mapping = {}
    for label, classes in per_label.items():
        if active_labels is not None and label not in active_labels:
            continue
        counts: dict[int, int] = {}
        for c in classes:
            counts[c] = counts.get(c, 0) + 1
        top = max(counts.values())
        tied = [c for c, n in counts.items() if n == top]
        # earliest-assigned class wins ties
        mapping[label] = next(c for c in classes if c in tied)
    return LabelMap(mapping)


def mapped_accuracy(predictions: np.ndarray, labels: np.ndarray, label_map: LabelMap) -> float:
    """Mean per-sample score under the label map: a sample of class y
    scores 1/|inverse(y)| when the predicted learner label is one of
    inverse(y), and 0 otherwise (also 0 when y was never mapped)."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(predictions) != len(labels):
        raise ValueError("predictions and labels must have equal length")
    total = 0.0
    for pred, y in zip(predictions, labels):
        learner_labels = label_map.inverse.get(int(y), ())
        if learner_labels and int(pred) in learner_labels:
            total += 1.0 / len(learner_labels)
    return total / len(labels) if len(labels) else 0.0


def unique_classes_learned(label_map: LabelMap) -> int:
    """Number of distinct ground-truth classes the map covers."""
    return len(set(label_map.label_to_class.values()))
