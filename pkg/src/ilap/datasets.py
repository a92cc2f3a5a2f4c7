"""Dataset ingestion and the unsupervised class-incremental exposure stream.

Images are kept as float32 numpy arrays of shape [N, C, H, W], normalized
with fixed per-dataset constants so runs are bit-reproducible. The stream
hands the learner exposures whose ground-truth class is hidden; the true
class is only reachable through the stream's bookkeeping methods.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, IngestionError, SchedulingError

logger = logging.getLogger(__name__)

DATA_ROOT_ENV = "ILAP_DATA_ROOT"

# Standard channel statistics used to normalize pixel values.
DATASET_STATS = {
    "mnist": ((0.1307,), (0.3081,)),
    "fashion_mnist": ((0.2860,), (0.3530,)),
    "svhn": ((0.4377, 0.4438, 0.4728), (0.1980, 0.2010, 0.1970)),
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4866, 0.4409), (0.2673, 0.2564, 0.2762)),
}

SUPPORTED_DATASETS = tuple(DATASET_STATS) + ("blobs2d",)


@dataclass
class LabeledImageSet:
    """Images with ground-truth class ids for one split of a dataset."""

    name: str
    split: str  # "train" or "test"
    images: np.ndarray  # [N, C, H, W] float32
    labels: np.ndarray  # [N] int64
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ConfigurationError(
                f"images must be [N, C, H, W], got shape {self.images.shape}"
            )
        if len(self.images) != len(self.labels):
            raise ConfigurationError("images and labels length mismatch")
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ConfigurationError(
                f"labels must lie in [0, {self.num_classes})"
            )

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_indices(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)


@dataclass(frozen=True)
class SampleBatch:
    """A set of samples plus their indices into the source image set."""

    ids: np.ndarray  # [n] int64, indices into LabeledImageSet
    images: np.ndarray  # [n, C, H, W]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class Exposure:
    """One incremental task: images of a single (hidden) class.

    Deliberately carries no ground-truth class; the harness keeps that
    association in `ExposureStream` bookkeeping only.
    """

    index: int
    train: SampleBatch
    val: SampleBatch

    @property
    def images(self) -> np.ndarray:
        return np.concatenate([self.train.images, self.val.images])

    @property
    def size(self) -> int:
        return len(self.train) + len(self.val)


@dataclass(frozen=True)
class StreamConfig:
    """Parameters governing the exposure sequence of one run."""

    class_ids: tuple[int, ...]
    repeats_per_class: int
    exposure_size: int
    val_ratio: float = 0.8  # train share of each exposure
    seed: int = 0

    def __post_init__(self):
        if self.repeats_per_class < 1:
            raise ConfigurationError("repeats_per_class must be >= 1")
        if len(self.class_ids) < 1:
            raise ConfigurationError("class_ids must be non-empty")
        if self.exposure_size < 2:
            raise ConfigurationError("exposure_size must be >= 2")
        if not 0.0 < self.val_ratio < 1.0:
            raise ConfigurationError("val_ratio must lie in (0, 1)")

    @property
    def train_size(self) -> int:
        # round-half-up keeps 0.8 * 200 -> 160 exact
        return int(np.floor(self.exposure_size * self.val_ratio + 0.5))

    @property
    def val_size(self) -> int:
        return self.exposure_size - self.train_size


def generate_schedule(cfg: StreamConfig) -> np.ndarray:
    """Return the ordered class ids of the stream: each class appears
    exactly `repeats_per_class` times, in a seeded uniform permutation."""
    base = np.repeat(np.asarray(cfg.class_ids, dtype=np.int64), cfg.repeats_per_class)
    rng = np.random.default_rng(cfg.seed)
    return rng.permutation(base)


class ExposureStream:
    """Materializes the exposure sequence for one run.

    Sample ids are assigned to schedule slots up front, so materializing
    the same slot twice yields identical samples. Samples are drawn
    without replacement across repeats of a class; if a class is too
    small for that, the stream falls back to per-exposure draws that may
    reuse samples across exposures (never within one) and logs a warning.
    """

    def __init__(
        self,
        dataset: LabeledImageSet,
        cfg: StreamConfig,
        schedule: np.ndarray | None = None,
    ):
        self.dataset = dataset
        self.cfg = cfg
        if schedule is None:
            schedule = generate_schedule(cfg)
        else:
            schedule = np.asarray(schedule, dtype=np.int64)
            if not set(schedule.tolist()) <= set(cfg.class_ids):
                raise SchedulingError("explicit schedule contains unknown class ids")
        self._schedule = schedule
        self._hidden_classes = schedule.copy()
        self._assignments = self._assign_samples()

    def _assign_samples(self) -> list[np.ndarray]:
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed + 1)
        counts = {c: int(np.sum(self._schedule == c)) for c in cfg.class_ids}
        pools: dict[int, list[np.ndarray]] = {}
        for c in cfg.class_ids:
            avail = self.dataset.class_indices(c)
            if len(avail) == 0:
                raise SchedulingError(
                    f"class {c} has no samples in the {self.dataset.split} split"
                )
            needed = counts[c] * cfg.exposure_size
            if len(avail) >= needed:
                perm = rng.permutation(avail)
                pools[c] = [
                    perm[i * cfg.exposure_size : (i + 1) * cfg.exposure_size]
                    for i in range(counts[c])
                ]
            elif len(avail) >= cfg.exposure_size:
                logger.warning(
                    "class %d has %d samples but the schedule needs %d; "
                    "reusing samples across exposures",
                    c,
                    len(avail),
                    needed,
                )
                pools[c] = [
                    rng.choice(avail, size=cfg.exposure_size, replace=False)
                    for _ in range(counts[c])
                ]
            else:
                raise SchedulingError(
                    f"class {c} has only {len(avail)} samples; "
                    f"exposure_size={cfg.exposure_size} cannot be met"
                )
        taken = {c: 0 for c in cfg.class_ids}
        assignments = []
        for c in self._schedule:
            assignments.append(pools[int(c)][taken[int(c)]])
            taken[int(c)] += 1
        return assignments

    def __len__(self) -> int:
        return len(self._schedule)

    @property
    def schedule(self) -> np.ndarray:
        return self._schedule.copy()

    def exposure(self, i: int) -> Exposure:
        """Learner-facing view of exposure `i` (no class information)."""
        if not 0 <= i < len(self):
            raise SchedulingError(f"exposure index {i} outside schedule")
        ids = self._assignments[i]
        n_train = self.cfg.train_size
        train_ids, val_ids = ids[:n_train], ids[n_train:]
        return Exposure(
            index=i,
            train=SampleBatch(ids=train_ids, images=self.dataset.images[train_ids]),
            val=SampleBatch(ids=val_ids, images=self.dataset.images[val_ids]),
        )

    # -- harness bookkeeping (never passed to the learner) ------------

    def hidden_class(self, i: int) -> int:
        """Ground-truth class of exposure `i`; harness bookkeeping only."""
        return int(self._hidden_classes[i])

    def is_novel(self, i: int) -> bool:
        """True iff the class of exposure `i` was unseen before `i`."""
        c = self._hidden_classes[i]
        return not np.any(self._hidden_classes[:i] == c)


# ---------------------------------------------------------------------------
# Dataset loaders
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Blobs2dConfig:
    """Synthetic Gaussian clusters rendered as 2-channel 1x1 images."""

    num_classes: int = 5
    train_per_class: int = 2000
    test_per_class: int = 200
    center_radius: float = 3.0
    noise_std: float = 0.5
    seed: int = 0


def make_blobs2d(cfg: Blobs2dConfig = Blobs2dConfig()) -> tuple[LabeledImageSet, LabeledImageSet]:
    """Generate the blobs2d dataset: class centers on a circle in the
    plane, isotropic Gaussian noise, images of shape [2, 1, 1]."""
    rng = np.random.default_rng(cfg.seed)
    angles = 2 * np.pi * np.arange(cfg.num_classes) / cfg.num_classes
    centers = cfg.center_radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)

    def split(per_class: int, split_name: str) -> LabeledImageSet:
        feats = []
        labels = []
        for c in range(cfg.num_classes):
            pts = centers[c] + cfg.noise_std * rng.standard_normal((per_class, 2))
            feats.append(pts)
            labels.append(np.full(per_class, c, dtype=np.int64))
        images = np.concatenate(feats).astype(np.float32).reshape(-1, 2, 1, 1)
        return LabeledImageSet(
            name="blobs2d",
            split=split_name,
            images=images,
            labels=np.concatenate(labels),
            num_classes=cfg.num_classes,
        )

    return split(cfg.train_per_class, "train"), split(cfg.test_per_class, "test")


def _to_nchw(images: np.ndarray) -> np.ndarray:
    if images.ndim == 3:  # [N, H, W] grayscale
        return images[:, None, :, :]
    if images.shape[-1] in (1, 3):  # [N, H, W, C]
        return images.transpose(0, 3, 1, 2)
    return images  # already [N, C, H, W]


def _normalize(images: np.ndarray, name: str) -> np.ndarray:
    mean, std = DATASET_STATS[name]
    mean = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return (images - mean) / std


def load_dataset(
    name: str,
    root: str | None = None,
    normalize: bool = True,
    download: bool = False,
    **blobs_kwargs,
) -> tuple[LabeledImageSet, LabeledImageSet]:
    """Load `name` and return its (train, test) splits.

    `root` defaults to the ILAP_DATA_ROOT environment variable, then
    "./data". File layout follows the torchvision conventions for each
    dataset (e.g. MNIST/raw/*-ubyte, cifar-10-batches-py/). blobs2d is
    generated in memory; keyword arguments go to Blobs2dConfig.
    """
    name = name.lower()
    if name not in SUPPORTED_DATASETS:
        raise ConfigurationError(
            f"unknown dataset {name!r}; supported: {', '.join(SUPPORTED_DATASETS)}"
        )
    if name == "blobs2d":
        return make_blobs2d(Blobs2dConfig(**blobs_kwargs))

    if root is None:
        root = os.environ.get(DATA_ROOT_ENV, "./data")

    import torchvision.datasets as tvd

    loaders = {
        "mnist": lambda train: tvd.MNIST(root, train=train, download=download),
        "fashion_mnist": lambda train: tvd.FashionMNIST(root, train=train, download=download),
        "cifar10": lambda train: tvd.CIFAR10(root, train=train, download=download),
        "cifar100": lambda train: tvd.CIFAR100(root, train=train, download=download),
        "svhn": lambda train: tvd.SVHN(
            root, split="train" if train else "test", download=download
        ),
    }
    num_classes = {"mnist": 10, "fashion_mnist": 10, "cifar10": 10,
                   "cifar100": 100, "svhn": 10}[name]

    def build(train: bool) -> LabeledImageSet:
        try:
            ds = loaders[name](train)
        except (RuntimeError, FileNotFoundError, OSError) as err:
            raise IngestionError(
                f"cannot load {name} from {root!r}: {err}"
            ) from err
        images = np.asarray(ds.data)
        labels = np.asarray(getattr(ds, "targets", getattr(ds, "labels", None)))
        images = _to_nchw(images).astype(np.float32) / 255.0
        if normalize:
            images = _normalize(images, name)
        return LabeledImageSet(
            name=name,
            split="train" if train else "test",
            images=images,
            labels=labels.astype(np.int64),
            num_classes=num_classes,
        )

    return build(True), build(False)
