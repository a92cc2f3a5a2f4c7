"""Competing novelty scorers run under the same exposure protocol, plus
the supervised-oracle update path used as an accuracy upper bound.

All scorers return a scalar per exposure with the convention that
higher means more novel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import Exposure
from .errors import InvariantViolation, UnsupportedOperation
from .exemplars import ExemplarStore, commit_exposure, discard_weak_classes
from .learner import Learner, TrainConfig, fit

ODIN_TEMPERATURE = 2.0
ODIN_EPSILON = 0.0012


@dataclass(frozen=True)
class ScorerConfig:
    kind: str  # msp | odin | feature_distance
    temperature: float = ODIN_TEMPERATURE
    epsilon: float = ODIN_EPSILON

    def __post_init__(self):
        if self.kind not in ("msp", "odin", "feature_distance"):
            raise ValueError(f"unknown scorer kind {self.kind!r}")
        if self.temperature <= 0 or self.epsilon < 0:
            raise ValueError("temperature must be > 0 and epsilon >= 0")


def _active_softmax(learner: Learner, images, temperature: float = 1.0) -> np.ndarray:
    logits = learner.active_logits(images) / temperature
    logits = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(logits)
    return exps / exps.sum(axis=1, keepdims=True)


def msp_score(learner: Learner, images) -> float:
    """1 minus the mean maximum softmax probability over the exposure's
    images: low confidence reads as novelty."""
    probs = _active_softmax(learner, images)
    return float(1.0 - probs.max(axis=1).mean())


def odin_score(
    learner: Learner,
    images,
    temperature: float = ODIN_TEMPERATURE,
    epsilon: float = ODIN_EPSILON,
    batch_size: int = 128,
) -> float:
    """Temperature-scaled MSP after a confidence-raising input
    perturbation: each image moves epsilon along the sign of the input
    gradient of its max temperature-scaled log-probability."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    cols = torch.as_tensor(learner.label_registry)
    if len(cols) == 0:
        raise InvariantViolation("no active labels")
    confidences = []
    learner.backbone.eval()
    learner.head.eval()
    for start in range(0, len(images), batch_size):
        x = learner._prep(images[start : start + batch_size])
        if epsilon > 0:
            x = x.clone().requires_grad_(True)
            if not torch.is_grad_enabled():
                raise UnsupportedOperation("input gradients are disabled")
            logits = learner.head(learner.backbone(x))[:, cols] / temperature
            log_probs = F.log_softmax(logits, dim=1)
            top = log_probs.max(dim=1).values.sum()
            (grad,) = torch.autograd.grad(top, x)
            x = (x + epsilon * grad.sign()).detach()
        with torch.no_grad():
            logits = learner.head(learner.backbone(x))[:, cols] / temperature
            probs = F.softmax(logits, dim=1)
        confidences.append(probs.max(dim=1).values.cpu().numpy())
    return float(1.0 - np.concatenate(confidences).mean())


# ---------------------------------------------------------------------------
# Feature-distance scorer (running class means in feature space)
# ---------------------------------------------------------------------------


@dataclass
class ClassMeans:
    """Running per-class mean feature vectors."""

    sums: dict[int, np.ndarray] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    @property
    def labels(self) -> list[int]:
        return sorted(self.sums)

    def mean(self, label: int) -> np.ndarray:
        if label not in self.sums:
            raise KeyError(f"no feature mean for label {label}")
        return self.sums[label] / self.counts[label]

    def remove(self, label: int):
        self.sums.pop(label, None)
        self.counts.pop(label, None)

    def state(self) -> dict:
        return {
            "sums": {int(l): s.tolist() for l, s in self.sums.items()},
            "counts": {int(l): int(c) for l, c in self.counts.items()},
        }

    @classmethod
    def from_state(cls, state: dict) -> "ClassMeans":
        return cls(
            sums={int(l): np.asarray(s) for l, s in state["sums"].items()},
            counts={int(l): int(c) for l, c in state["counts"].items()},
        )


def feature_mean_update(
    means: ClassMeans, learner: Learner, images, label: int
) -> ClassMeans:
    """Fold the features of `images` (under the current learner) into the
    running mean of `label`."""
    feats = learner.features(images)
    if label in means.sums:
        means.sums[label] = means.sums[label] + feats.sum(axis=0)
        means.counts[label] += len(feats)
    else:
        means.sums[label] = feats.sum(axis=0)
        means.counts[label] = len(feats)
    return means


def nearest_class_mean(
    learner: Learner, images, means: ClassMeans
) -> tuple[int, float]:
    """(closest class, Euclidean distance) between the exposure's mean
    feature and the stored class means."""
    if not means.labels:
        raise InvariantViolation("no class means available")
    center = learner.features(images).mean(axis=0)
    dists = {l: float(np.linalg.norm(center - means.mean(l))) for l in means.labels}
    best = min(dists, key=lambda l: (dists[l], l))
    return best, dists[best]


def feature_distance_score(learner: Learner, images, means: ClassMeans) -> float:
    """Minimum distance from the exposure's mean feature to any class
    mean; large distances read as novelty."""
    return nearest_class_mean(learner, images, means)[1]


def fit_distance_threshold(in_scores, out_scores) -> float:
    """Threshold maximizing F1 for novel-vs-repeated classification
    (novel positive, predicted novel when score >= threshold).

    Candidates are the lowest observed score (predict everything novel)
    plus the midpoints of consecutive distinct scores; ties go to the
    lowest candidate.
    """
    in_scores = np.asarray(in_scores, dtype=np.float64)
    out_scores = np.asarray(out_scores, dtype=np.float64)
    if len(in_scores) == 0 or len(out_scores) == 0:
        raise ValueError("need both in-distribution and novel scores")
    values = np.unique(np.concatenate([in_scores, out_scores]))
    candidates = np.concatenate([[values[0]], (values[:-1] + values[1:]) / 2.0])
    best_t, best_f1 = None, -1.0
    for t in candidates:
        tp = np.sum(out_scores >= t)
        fp = np.sum(in_scores >= t)
        fn = len(out_scores) - tp
        f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
        if f1 > best_f1:
            best_t, best_f1 = float(t), float(f1)
    return best_t


# ---------------------------------------------------------------------------
# Supervised oracle (upper bound: labels revealed)
# ---------------------------------------------------------------------------


@dataclass
class OracleState:
    """Bookkeeping for the supervised mode: which learner label each
    ground-truth class was given."""

    class_to_label: dict[int, int] = field(default_factory=dict)


def supervised_oracle_step(
    learner: Learner,
    store: ExemplarStore,
    exposure: Exposure,
    true_class: int,
    oracle: OracleState,
    train_cfg: TrainConfig,
    rng: np.random.Generator,
    generator: torch.Generator | None = None,
    discard_floor: float = 0.2,
) -> tuple[int, list[int]]:
    """Same update path as the unsupervised pipeline, but with the
    exposure's class revealed: a seen class reuses its label, an unseen
    one gets a fresh label. Returns (assigned label, discarded labels).
    """
    from .detector import _val_with_banks, _with_banks

    if true_class in oracle.class_to_label:
        assigned = oracle.class_to_label[true_class]
        bank_images, bank_labels = store.merged_train()
        train_images = np.concatenate([bank_images, exposure.train.images])
        train_labels = np.concatenate(
            [bank_labels, np.full(len(exposure.train), assigned, dtype=np.int64)]
        )
        val_images, val_labels = store.merged_val()
    else:
        assigned = learner.add_label()
        oracle.class_to_label[true_class] = assigned
        train_images, train_labels = _with_banks(store, exposure, assigned, rng)
        val_images, val_labels = _val_with_banks(store, exposure, assigned)
    fit(learner, train_images, train_labels, val_images, val_labels,
        train_cfg, generator)
    commit_exposure(store, assigned, exposure.train, exposure.val, learner)
    discarded = discard_weak_classes(store, learner, discard_floor)
    for label in discarded:
        for cls, l in list(oracle.class_to_label.items()):
            if l == label:
                del oracle.class_to_label[cls]
    return assigned, discarded
