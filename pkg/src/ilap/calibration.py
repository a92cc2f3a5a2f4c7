"""Imbalance-ratio sweep: picks the detection-training knobs from a
held-out dataset.

For each candidate ratio the sweep measures two quantities across
trials: the accuracy drop a repeated-class exposure inflicts on its own
class, and the largest drop a genuinely novel exposure inflicts on any
learned class. The chosen ratio maximizes the gap between the two; the
decision threshold is their midpoint there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .datasets import LabeledImageSet, SampleBatch, Exposure
from .detector import DetectorConfig, accuracy_drops, detection_train
from .errors import ConfigurationError
from .exemplars import ExemplarStore, commit_exposure
from .learner import TrainConfig, build_learner, fit


@dataclass(frozen=True)
class SweepResult:
    lambda_grid: tuple[float, ...]
    drop_repeated: tuple[float, ...]  # mean drop of the repeated class
    drop_nonrepeated: tuple[float, ...]  # mean max drop under a novel exposure
    trials: int

    def __post_init__(self):
        if not (len(self.lambda_grid) == len(self.drop_repeated) == len(self.drop_nonrepeated)):
            raise ValueError("curves must align with the grid")

    def to_dict(self) -> dict:
        return {
            "lambda_grid": list(self.lambda_grid),
            "drop_repeated": list(self.drop_repeated),
            "drop_nonrepeated": list(self.drop_nonrepeated),
            "trials": self.trials,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SweepResult":
        return cls(
            lambda_grid=tuple(d["lambda_grid"]),
            drop_repeated=tuple(d["drop_repeated"]),
            drop_nonrepeated=tuple(d["drop_nonrepeated"]),
            trials=int(d["trials"]),
        )


def _draw_exposure(
    dataset: LabeledImageSet, class_id: int, size: int, train_share: float,
    rng: np.random.Generator, index: int = 0,
) -> Exposure:
    avail = dataset.class_indices(class_id)
    ids = rng.choice(avail, size=size, replace=len(avail) < size)
    n_train = int(np.floor(size * train_share + 0.5))
    return Exposure(
        index=index,
        train=SampleBatch(ids=ids[:n_train], images=dataset.images[ids[:n_train]]),
        val=SampleBatch(ids=ids[n_train:], images=dataset.images[ids[n_train:]]),
    )


def run_imbalance_sweep(
    dataset: LabeledImageSet,
    arch: str,
    lambda_grid,
    trials: int = 5,
    seed: int = 0,
    base_classes: int = 2,
    exposure_size: int = 200,
    train_share: float = 0.8,
    train_cfg: TrainConfig = TrainConfig(),
    **arch_kwargs,
) -> SweepResult:
    """Measure repeated- and non-repeated-class accuracy drops per
    imbalance ratio.

    Each trial trains a fresh base learner on `base_classes` sampled
    classes, then runs detection training twice per grid point with the
    same probe exposures: once with a fresh exposure of a learned class
    (recording that class's drop) and once with an exposure of a
    held-out class (recording the largest drop over learned classes).
    """
    if dataset.num_classes < base_classes + 1:
        raise ConfigurationError(
            f"sweep needs at least {base_classes + 1} classes, "
            f"dataset has {dataset.num_classes}"
        )
    lambda_grid = tuple(float(l) for l in lambda_grid)
    n_train = int(np.floor(exposure_size * train_share + 0.5))
    cap_train, cap_val = n_train, exposure_size - n_train

    acc_rep = np.zeros((len(lambda_grid), trials))
    acc_non = np.zeros((len(lambda_grid), trials))
    for t in range(trials):
        rng = np.random.default_rng(seed * 1000 + t)
        torch.manual_seed(seed * 1000 + t)
        gen = torch.Generator().manual_seed(seed * 1000 + t)

        classes = rng.choice(dataset.num_classes, size=base_classes + 1, replace=False)
        base, novel_class = classes[:-1], int(classes[-1])

        learner = build_learner(arch, dataset.image_shape, **arch_kwargs)
        store = ExemplarStore(cap_train, cap_val)
        exposures = [
            _draw_exposure(dataset, int(c), exposure_size, train_share, rng, i)
            for i, c in enumerate(base)
        ]
        labels = [learner.add_label() for _ in base]
        train_images = np.concatenate([e.train.images for e in exposures])
        train_labels = np.concatenate(
            [np.full(len(e.train), l, dtype=np.int64) for e, l in zip(exposures, labels)]
        )
        val_images = np.concatenate([e.val.images for e in exposures])
        val_labels = np.concatenate(
            [np.full(len(e.val), l, dtype=np.int64) for e, l in zip(exposures, labels)]
        )
        fit(learner, train_images, train_labels, val_images, val_labels, train_cfg, gen)
        for e, l in zip(exposures, labels):
            commit_exposure(store, l, e.train, e.val, learner)

        repeated_label = labels[0]
        probe_repeat = _draw_exposure(
            dataset, int(base[0]), exposure_size, train_share, rng, len(exposures)
        )
        probe_novel = _draw_exposure(
            dataset, novel_class, exposure_size, train_share, rng, len(exposures) + 1
        )

        for gi, lam in enumerate(lambda_grid):
            cfg = DetectorConfig(imbalance_ratio=lam)
            for probe, is_repeat in ((probe_repeat, True), (probe_novel, False)):
                _, pre, post = detection_train(
                    learner, probe, store, cfg, train_cfg,
                    np.random.default_rng(seed * 1000 + t + 7 * gi),
                    torch.Generator().manual_seed(seed * 1000 + t + 7 * gi),
                )
                keys = sorted(pre)
                drops = accuracy_drops(
                    np.array([pre[k] for k in keys]), np.array([post[k] for k in keys])
                )
                if is_repeat:
                    acc_rep[gi, t] = drops[keys.index(repeated_label)]
                else:
                    acc_non[gi, t] = drops.max()

    return SweepResult(
        lambda_grid=lambda_grid,
        drop_repeated=tuple(acc_rep.mean(axis=1).tolist()),
        drop_nonrepeated=tuple(acc_non.mean(axis=1).tolist()),
        trials=trials,
    )


def select_lambda_theta(sweep: SweepResult) -> tuple[float, float]:
    """Grid point with the largest gap between the two drop curves
    (smaller ratio on ties), and the curves' midpoint there as the
    decision threshold."""
    rep = np.asarray(sweep.drop_repeated)
    non = np.asarray(sweep.drop_nonrepeated)
    idx = int(np.argmax(rep - non))  # first max = smaller ratio on ties
    return sweep.lambda_grid[idx], float((rep[idx] + non[idx]) / 2.0)
