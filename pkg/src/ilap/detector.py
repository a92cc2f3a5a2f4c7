"""Novelty detection through confusion: detection training and the
per-exposure update pipeline.

For each incoming exposure a copy of the learner is trained with the
exposure assigned a brand-new label. If the exposure repeats a learned
class, that class's validation accuracy collapses (the copy now maps
one distribution to two labels); the per-class accuracy drops are the
detection signal. A class-imbalance during this training amplifies the
drop for repeated classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .datasets import Exposure
from .errors import InvariantViolation
from .exemplars import (
    ExemplarStore,
    commit_exposure,
    discard_weak_classes,
    sample_imbalanced,
)
from .learner import Learner, TrainConfig, fit, per_class_accuracy

DROP_EPS = 1e-8


@dataclass(frozen=True)
class DetectorConfig:
    """Detection-training knobs.

    decision_threshold is the accuracy-drop fraction above which an
    exposure is declared a repeat (sensible range (0, 1); values outside
    it are allowed for diagnostics: >= 1 forces every exposure novel, 0
    forces every exposure repeated). imbalance_ratio is the fraction by
    which stored classes are undersized during detection training.
    """

    decision_threshold: float = 0.6
    imbalance_ratio: float = 0.5
    discard_floor: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.imbalance_ratio < 1.0:
            raise ValueError("imbalance_ratio must lie in [0, 1)")
        if not 0.0 <= self.discard_floor <= 1.0:
            raise ValueError("discard_floor must lie in [0, 1]")


@dataclass(frozen=True)
class Decision:
    novel: bool
    label: int  # the new label if novel, else the matched existing label


@dataclass(frozen=True)
class DetectionOutcome:
    """Per-class accuracy drops and the resulting novelty decision."""

    labels: tuple[int, ...]  # active labels at detection time, ascending
    drops: np.ndarray  # fractional accuracy decrease per label
    decision: Decision
    pre_acc: np.ndarray
    post_acc: np.ndarray


def accuracy_drops(pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    """Fractional accuracy decrease per class, clamped to [0, 1].

    Improvements carry no novelty signal (clamped to 0); a class with
    zero accuracy before the update contributes 0 via the eps guard.
    """
    pre = np.asarray(pre, dtype=np.float64)
    post = np.asarray(post, dtype=np.float64)
    if pre.shape != post.shape:
        raise ValueError("pre and post accuracy vectors must align")
    drops = (pre - post) / np.maximum(pre, DROP_EPS)
    return np.clip(drops, 0.0, 1.0)


def decide(drops: np.ndarray, labels: tuple[int, ...], threshold: float, next_label: int) -> Decision:
    """Repeat iff the largest drop exceeds the threshold; the matched
    label is the argmax (lowest label id on ties)."""
    drops = np.asarray(drops)
    if len(drops) == 0:
        return Decision(novel=True, label=next_label)
    if len(drops) != len(labels):
        raise ValueError("drops and labels must align")
    best = int(np.argmax(drops))  # first maximum; labels ascending
    if drops[best] > threshold:
        return Decision(novel=False, label=labels[best])
    return Decision(novel=True, label=next_label)


def novelty_score(outcome: DetectionOutcome) -> float:
    """Scalar novelty score for metric evaluation: 1 - max drop (an
    exposure with no prior classes scores 1)."""
    if len(outcome.drops) == 0:
        return 1.0
    return float(1.0 - np.max(outcome.drops))


def detection_train(
    learner: Learner,
    exposure: Exposure,
    store: ExemplarStore,
    cfg: DetectorConfig,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
    generator: torch.Generator | None = None,
) -> tuple[Learner, dict[int, float], dict[int, float]]:
    """Train a copy of the learner with the exposure as a new class.

    The copy sees an imbalanced replay of the stored classes (each
    undersized by cfg.imbalance_ratio relative to the exposure's train
    split) plus the exposure labeled with a brand-new id; early stopping
    validates on the val banks plus the exposure's val split. Returns
    the trained copy and the per-class val-bank accuracies of the
    original and the copy (old labels only). Neither the learner nor the
    store is mutated.
    """
    if not learner.label_registry:
        raise InvariantViolation("detection training needs at least one learned class")
    old_labels = list(learner.label_registry)
    pre = per_class_accuracy(learner, store.val_banks)

    probe = learner.clone()
    new_label = probe.add_label()

    sampled = sample_imbalanced(store, cfg.imbalance_ratio, len(exposure.train), rng)
    train_images = np.concatenate(
        [sampled[l].images for l in sorted(sampled)] + [exposure.train.images]
    )
    train_labels = np.concatenate(
        [np.full(len(sampled[l]), l, dtype=np.int64) for l in sorted(sampled)]
        + [np.full(len(exposure.train), new_label, dtype=np.int64)]
    )
    val_images, val_labels = store.merged_val()
    val_images = np.concatenate([val_images, exposure.val.images])
    val_labels = np.concatenate(
        [val_labels, np.full(len(exposure.val), new_label, dtype=np.int64)]
    )

    fit(probe, train_images, train_labels, val_images, val_labels, train_cfg, generator)

    post = per_class_accuracy(probe, store.val_banks, labels=old_labels)
    return probe, pre, post


def process_exposure(
    learner: Learner,
    store: ExemplarStore,
    exposure: Exposure,
    cfg: DetectorConfig,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
    generator: torch.Generator | None = None,
) -> tuple[Learner, DetectionOutcome, int, list[int]]:
    """Run the full per-exposure pipeline: detection training, the
    novelty decision, the final model update, the exemplar commit, and
    the low-accuracy discard.

    Returns (updated learner, detection outcome, assigned label,
    discarded labels). A novel exposure keeps the detection-trained copy
    and gives it one balanced training pass; a repeated exposure
    retrains the original learner with the matched label.
    """
    if not learner.label_registry:
        # nothing learned yet: nothing to confuse, the exposure is novel
        new_label = learner.add_label()
        outcome = DetectionOutcome(
            labels=(),
            drops=np.empty(0),
            decision=Decision(novel=True, label=new_label),
            pre_acc=np.empty(0),
            post_acc=np.empty(0),
        )
        train_images, train_labels = _with_banks(store, exposure, new_label, rng)
        val_images, val_labels = _val_with_banks(store, exposure, new_label)
        fit(learner, train_images, train_labels, val_images, val_labels,
            train_cfg, generator)
        updated = learner
        assigned = new_label
    else:
        probe, pre, post = detection_train(
            learner, exposure, store, cfg, train_cfg, rng, generator
        )
        labels = tuple(sorted(pre))
        pre_vec = np.array([pre[l] for l in labels])
        post_vec = np.array([post[l] for l in labels])
        drops = accuracy_drops(pre_vec, post_vec)
        decision = decide(drops, labels, cfg.decision_threshold,
                          next_label=probe.num_labels - 1)
        outcome = DetectionOutcome(
            labels=labels, drops=drops, decision=decision,
            pre_acc=pre_vec, post_acc=post_vec,
        )
        assigned = decision.label
        if decision.novel:
            # keep the detection-trained copy; rebalance with a full pass
            updated = probe
            train_images, train_labels = _with_banks(store, exposure, assigned, rng)
            val_images, val_labels = _val_with_banks(store, exposure, assigned)
            fit(updated, train_images, train_labels, val_images, val_labels,
                train_cfg, generator)
        else:
            updated = learner
            bank_images, bank_labels = store.merged_train()
            train_images = np.concatenate([bank_images, exposure.train.images])
            train_labels = np.concatenate(
                [bank_labels, np.full(len(exposure.train), assigned, dtype=np.int64)]
            )
            val_images, val_labels = store.merged_val()
            fit(updated, train_images, train_labels, val_images, val_labels,
                train_cfg, generator)

    commit_exposure(store, assigned, exposure.train, exposure.val, updated)
    discarded = discard_weak_classes(store, updated, cfg.discard_floor)
    return updated, outcome, assigned, discarded


def _with_banks(store, exposure, label, rng):
    """Exposure train split labeled `label`, plus a balanced draw from
    every stored class."""
    images = [exposure.train.images]
    labels = [np.full(len(exposure.train), label, dtype=np.int64)]
    if store.labels:
        balanced = sample_imbalanced(store, 0.0, len(exposure.train), rng)
        for l in sorted(balanced):
            images.append(balanced[l].images)
            labels.append(np.full(len(balanced[l]), l, dtype=np.int64))
    return np.concatenate(images), np.concatenate(labels)


def _val_with_banks(store, exposure, label):
    images = [exposure.val.images]
    labels = [np.full(len(exposure.val), label, dtype=np.int64)]
    if store.labels:
        bank_images, bank_labels = store.merged_val()
        images.append(bank_images)
        labels.append(bank_labels)
    return np.concatenate(images), np.concatenate(labels)
