"""Bounded per-class sample banks with representative selection.

Each active label owns a train bank (for replay) and a val bank (for
accuracy assessment). Banks are capped per class; when a commit
overflows the cap, old and new samples compete jointly and the most
representative ones are kept: the samples whose features are nearest to
the mean feature of all candidates.
"""

from __future__ import annotations

import logging

import numpy as np

from .datasets import LabeledImageSet, SampleBatch
from .learner import Learner, per_class_accuracy

logger = logging.getLogger(__name__)


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def representative_indices(images: np.ndarray, learner: Learner, m: int) -> np.ndarray:
    """Positions of the m images whose features are closest (Euclidean)
    to the mean feature of the whole input set; ties keep input order."""
    if m >= len(images):
        if m > len(images):
            logger.warning(
                "asked for %d representatives from %d images; keeping all",
                m, len(images),
            )
        return np.arange(len(images))
    feats = learner.features(images)
    dists = np.linalg.norm(feats - feats.mean(axis=0, keepdims=True), axis=1)
    return np.argsort(dists, kind="stable")[:m]


def select_representatives(images: np.ndarray, learner: Learner, m: int) -> np.ndarray:
    """The m most representative images of the input set (see
    representative_indices)."""
    return images[representative_indices(images, learner, m)]


class ExemplarStore:
    """Paired bounded train/val banks, one pair per active label."""

    def __init__(self, cap_train: int, cap_val: int):
        if cap_train < 1 or cap_val < 1:
            raise ValueError("bank caps must be positive")
        self.cap_train = cap_train
        self.cap_val = cap_val
        self._train: dict[int, SampleBatch] = {}
        self._val: dict[int, SampleBatch] = {}

    @property
    def labels(self) -> list[int]:
        return sorted(self._train)

    def __contains__(self, label: int) -> bool:
        return label in self._train

    def train_bank(self, label: int) -> SampleBatch:
        return self._train[label]

    def val_bank(self, label: int) -> SampleBatch:
        return self._val[label]

    @property
    def train_banks(self) -> dict[int, SampleBatch]:
        return dict(self._train)

    @property
    def val_banks(self) -> dict[int, SampleBatch]:
        return dict(self._val)

    def remove(self, label: int):
        self._train.pop(label, None)
        self._val.pop(label, None)

    def merged_train(self) -> tuple[np.ndarray, np.ndarray]:
        """All train-bank images with their labels, concatenated."""
        return self._merge(self._train)

    def merged_val(self) -> tuple[np.ndarray, np.ndarray]:
        return self._merge(self._val)

    @staticmethod
    def _merge(banks: dict[int, SampleBatch]) -> tuple[np.ndarray, np.ndarray]:
        if not banks:
            raise ValueError("store is empty")
        images = np.concatenate([banks[l].images for l in sorted(banks)])
        labels = np.concatenate(
            [np.full(len(banks[l]), l, dtype=np.int64) for l in sorted(banks)]
        )
        return images, labels

    # -- persistence: sample ids only; images re-resolved from the dataset

    def state(self) -> dict:
        return {
            "version": 1,
            "cap_train": self.cap_train,
            "cap_val": self.cap_val,
            "train_ids": {int(l): b.ids.tolist() for l, b in self._train.items()},
            "val_ids": {int(l): b.ids.tolist() for l, b in self._val.items()},
        }

    @classmethod
    def from_state(cls, state: dict, dataset: LabeledImageSet) -> "ExemplarStore":
        store = cls(state["cap_train"], state["cap_val"])
        for key, banks in (("train_ids", store._train), ("val_ids", store._val)):
            for label, ids in state[key].items():
                ids = np.asarray(ids, dtype=np.int64)
                banks[int(label)] = SampleBatch(ids=ids, images=dataset.images[ids])
        return store


def commit_exposure(
    store: ExemplarStore,
    label: int,
    e_train: SampleBatch,
    e_val: SampleBatch,
    learner: Learner,
) -> ExemplarStore:
    """Fold an exposure's samples into the banks of `label`. For a
    repeated label the old bank and the new samples compete jointly for
    the cap; selection ranks distance to the candidate mean feature."""

    def fold(old: SampleBatch | None, new: SampleBatch, cap: int) -> SampleBatch:
        if old is None:
            ids = new.ids
            images = new.images
        else:
            ids = np.concatenate([old.ids, new.ids])
            images = np.concatenate([old.images, new.images])
        if len(ids) <= cap:
            return SampleBatch(ids=ids, images=images)
        keep = representative_indices(images, learner, cap)
        return SampleBatch(ids=ids[keep], images=images[keep])

    store._train[label] = fold(store._train.get(label), e_train, store.cap_train)
    store._val[label] = fold(store._val.get(label), e_val, store.cap_val)
    return store


def sample_imbalanced(
    store: ExemplarStore,
    imbalance_ratio: float,
    e_train_size: int,
    rng: np.random.Generator,
) -> dict[int, SampleBatch]:
    """Per-class subsets of the train banks sized so each stored class
    contributes a (1 - imbalance_ratio) fraction of the incoming
    exposure's training size (uniform draws without replacement)."""
    if not 0.0 <= imbalance_ratio < 1.0:
        raise ValueError("imbalance_ratio must lie in [0, 1)")
    target = round_half_up((1.0 - imbalance_ratio) * e_train_size)
    sampled = {}
    for label in store.labels:
        bank = store.train_bank(label)
        n = min(target, len(bank))
        pick = rng.choice(len(bank), size=n, replace=False)
        sampled[label] = SampleBatch(ids=bank.ids[pick], images=bank.images[pick])
    return sampled


def discard_weak_classes(
    store: ExemplarStore, learner: Learner, floor: float
) -> list[int]:
    """Drop every label whose val-bank accuracy is below `floor` from
    both the store and the learner's registry; returns removed labels."""
    accuracies = per_class_accuracy(learner, store.val_banks)
    removed = [label for label, acc in accuracies.items() if acc < floor]
    for label in removed:
        store.remove(label)
        learner.deactivate_label(label)
    return removed
