"""The trainable classifier: feature extractor plus a growable softmax head.

A Learner owns a backbone network, a linear head whose width K grows as
new labels are created, and a registry of the labels still active.
Discarded labels stay in the head (their column is masked at argmax
time) so label ids remain stable throughout a run.
"""

from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, IngestionError, InvariantViolation

logger = logging.getLogger(__name__)

ARCHS = ("resnet18", "small_cnn", "mlp")


@dataclass(frozen=True)
class TrainConfig:
    """Per-exposure training hyperparameters."""

    epochs: int = 15
    batch_size: int = 16
    lr_head: float = 2e-4
    patience: int = 3
    optimizer: str = "adam"
    weight_decay: float = 0.0  # keeps logit margins bounded on from-scratch archs

    @property
    def lr_features(self) -> float:
        # feature-extraction layers train ten times slower than the head
        return self.lr_head / 10.0

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ConfigurationError(f"unsupported optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")


class _Mlp(nn.Module):
    def __init__(
        self,
        in_features: int,
        hidden=(64, 32),
        bounded: bool = False,
        init_scale: float = 1.0,
    ):
        super().__init__()
        layers: list[nn.Module] = [nn.Flatten()]
        prev = in_features
        for width in hidden:
            layers += [nn.Linear(prev, width), nn.ReLU()]
            prev = width
        if bounded:
            layers[-1] = nn.Tanh()
        self.body = nn.Sequential(*layers)
        self.out_features = prev
        if init_scale != 1.0:
            # over-scaled start: with weight decay the feature map then
            # contracts over a run instead of expanding from a cold start
            with torch.no_grad():
                for module in self.body:
                    if isinstance(module, nn.Linear):
                        module.weight *= init_scale
                        module.bias *= init_scale

    def forward(self, x):
        return self.body(x)


class _SmallCnn(nn.Module):
    def __init__(self, in_channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, 32, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.AdaptiveAvgPool2d((4, 4)),
            nn.Flatten(),
            nn.Linear(64 * 16, 128),
            nn.ReLU(),
        )
        self.out_features = 128

    def forward(self, x):
        return self.body(x)


def _make_head(feature_dim: int, num_labels: int) -> nn.Linear:
    with warnings.catch_warnings():
        # torch warns on zero-width layers; K starts at 0 by design
        warnings.simplefilter("ignore", UserWarning)
        return nn.Linear(feature_dim, num_labels)


def _build_resnet18(pretrained: bool) -> tuple[nn.Module, int]:
    from torchvision.models import resnet18

    try:
        weights = "IMAGENET1K_V1" if pretrained else None
        net = resnet18(weights=weights)
    except Exception as err:
        raise IngestionError(f"pretrained resnet18 weights unavailable: {err}") from err
    feature_dim = net.fc.in_features
    net.fc = nn.Identity()
    return net, feature_dim


class Learner:
    """Classifier state: backbone, growable head, and label registry."""

    def __init__(
        self,
        arch: str,
        backbone: nn.Module,
        feature_dim: int,
        num_labels: int,
        pretrained: bool = False,
        input_size: int | None = None,
        device: str = "cpu",
    ):
        self.arch = arch
        self.backbone = backbone.to(device)
        self.feature_dim = feature_dim
        self.head = _make_head(feature_dim, num_labels).to(device)
        self.num_labels = num_labels
        self.label_registry: list[int] = list(range(num_labels))
        self.pretrained = pretrained
        self.input_size = input_size  # resize target, e.g. 224 for resnet18
        self.device = device

    # -- label management -------------------------------------------------

    def add_label(self) -> int:
        """Widen the head by one zero-initialized column; returns the new
        label id. Old-class logits are unchanged by the widening."""
        new_id = self.num_labels
        new_head = _make_head(self.feature_dim, self.num_labels + 1).to(self.device)
        with torch.no_grad():
            if self.num_labels:
                new_head.weight[: self.num_labels] = self.head.weight
                new_head.bias[: self.num_labels] = self.head.bias
            new_head.weight[new_id].zero_()
            new_head.bias[new_id].zero_()
        self.head = new_head
        self.num_labels += 1
        self.label_registry.append(new_id)
        return new_id

    def deactivate_label(self, label: int):
        """Mask a label out of predictions; its head column is kept so
        remaining label ids stay stable."""
        self.label_registry.remove(label)

    def clone(self) -> "Learner":
        """Deep copy sharing no mutable storage with the original."""
        other = Learner.__new__(Learner)
        other.arch = self.arch
        other.backbone = copy.deepcopy(self.backbone)
        other.feature_dim = self.feature_dim
        other.head = copy.deepcopy(self.head)
        other.num_labels = self.num_labels
        other.label_registry = list(self.label_registry)
        other.pretrained = self.pretrained
        other.input_size = self.input_size
        other.device = self.device
        return other

    # -- forward passes ----------------------------------------------------

    def _prep(self, images: np.ndarray | torch.Tensor) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(images), dtype=torch.float32, device=self.device)
        if self.input_size is not None and x.shape[-1] != self.input_size:
            if x.shape[1] == 1:  # grayscale into an RGB backbone
                x = x.repeat(1, 3, 1, 1)
            x = F.interpolate(
                x, size=(self.input_size, self.input_size),
                mode="bilinear", align_corners=False,
            )
        return x

    def _forward(self, images, batch_size: int = 256):
        """Yield (features, logits) per evaluation batch, grad-free."""
        self.backbone.eval()
        self.head.eval()
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                x = self._prep(images[start : start + batch_size])
                feats = self.backbone(x)
                yield feats, self.head(feats)

    def features(self, images) -> np.ndarray:
        """Penultimate-layer feature vectors, [n, feature_dim]."""
        out = [f.cpu().numpy() for f, _ in self._forward(images)]
        return np.concatenate(out) if out else np.empty((0, self.feature_dim))

    def logits(self, images) -> np.ndarray:
        out = [l.cpu().numpy() for _, l in self._forward(images)]
        return np.concatenate(out) if out else np.empty((0, self.num_labels))

    def active_logits(self, images) -> np.ndarray:
        """Logits restricted to registry columns, [n, |registry|]."""
        if not self.label_registry:
            raise InvariantViolation("no active labels")
        return self.logits(images)[:, self.label_registry]

    def predict(self, images) -> np.ndarray:
        """Argmax over registry-active logits, returned as label ids."""
        active = np.asarray(self.label_registry)
        return active[np.argmax(self.active_logits(images), axis=1)]

    # -- (de)serialization ---------------------------------------------------

    def state(self) -> dict:
        return {
            "version": 1,
            "arch": self.arch,
            "feature_dim": self.feature_dim,
            "num_labels": self.num_labels,
            "label_registry": list(self.label_registry),
            "pretrained": self.pretrained,
            "input_size": self.input_size,
            "backbone": self.backbone.state_dict(),
            "head": self.head.state_dict(),
        }

    def load_state(self, state: dict):
        if state.get("version") != 1:
            raise ConfigurationError("unknown learner checkpoint version")
        while self.num_labels < state["num_labels"]:
            self.add_label()
        self.label_registry = list(state["label_registry"])
        self.backbone.load_state_dict(state["backbone"])
        self.head.load_state_dict(state["head"])


def build_learner(
    arch: str,
    in_shape: tuple[int, int, int],
    pretrained: bool = False,
    num_initial_labels: int = 0,
    device: str = "cpu",
    **arch_kwargs,
) -> Learner:
    """Construct a learner of the given architecture for images of shape
    in_shape = (C, H, W). resnet18 inputs are resized to 224."""
    c, h, w = in_shape
    if arch == "mlp":
        backbone = _Mlp(c * h * w, **arch_kwargs)
        feature_dim, input_size = backbone.out_features, None
    elif arch == "small_cnn":
        backbone = _SmallCnn(c, **arch_kwargs)
        feature_dim, input_size = backbone.out_features, None
    elif arch == "resnet18":
        backbone, feature_dim = _build_resnet18(pretrained)
        input_size = 224
    else:
        raise ConfigurationError(f"unknown architecture {arch!r}; options: {ARCHS}")
    if pretrained and arch != "resnet18":
        logger.warning("pretrained weights only exist for resnet18; ignoring flag")
    return Learner(
        arch, backbone, feature_dim, num_initial_labels,
        pretrained=pretrained, input_size=input_size, device=device,
    )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _registry_positions(learner: Learner, labels: np.ndarray) -> np.ndarray:
    """Map label ids to their column positions within the registry."""
    remap = np.full(learner.num_labels, -1, dtype=np.int64)
    remap[np.asarray(learner.label_registry)] = np.arange(len(learner.label_registry))
    return remap[labels]


def _aggregate_accuracy(learner: Learner, images, labels: np.ndarray) -> float:
    return float(np.mean(learner.predict(images) == labels))


def fit(
    learner: Learner,
    train_images,
    train_labels: np.ndarray,
    val_images=None,
    val_labels: np.ndarray | None = None,
    cfg: TrainConfig = TrainConfig(),
    generator: torch.Generator | None = None,
) -> Learner:
    """Train in place and return the learner with the parameters of the
    epoch that scored the best aggregate validation accuracy.

    Early stopping: training stops once `cfg.patience` consecutive epochs
    fail to improve validation accuracy. Without a validation set the
    loop degrades to fixed-epoch training (with a warning).
    """
    if cfg.epochs == 0:
        return learner
    train_labels = np.asarray(train_labels)
    if len(train_images) == 0:
        raise InvariantViolation("empty training set")
    for label in np.unique(train_labels):
        if int(label) not in learner.label_registry:
            raise InvariantViolation(f"training label {label} not in registry")

    has_val = val_images is not None and len(val_images) > 0
    if not has_val:
        logger.warning("no validation samples; falling back to fixed-epoch training")

    if generator is None:
        generator = torch.Generator()

    params = [
        {"params": learner.backbone.parameters(), "lr": cfg.lr_features},
        {"params": learner.head.parameters(), "lr": cfg.lr_head},
    ]
    optimizer = torch.optim.Adam(params, weight_decay=cfg.weight_decay)
    cols = torch.as_tensor(learner.label_registry, device=learner.device)
    positions = torch.as_tensor(
        _registry_positions(learner, train_labels),
        dtype=torch.long, device=learner.device,
    )

    best_acc = -1.0
    prev_best = -1.0
    best_state = None
    stale = 0
    n = len(train_images)
    for _ in range(cfg.epochs):
        learner.backbone.train()
        learner.head.train()
        order = torch.randperm(n, generator=generator).numpy()
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = learner._prep(train_images[idx])
            logits = learner.head(learner.backbone(x))
            loss = F.cross_entropy(logits[:, cols], positions[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        if not has_val:
            continue
        acc = _aggregate_accuracy(learner, val_images, np.asarray(val_labels))
        if acc >= best_acc:
            # ties keep the later epoch: for a repeated-class exposure the
            # aggregate is flat while the new label takes the class over,
            # and the post-takeover parameters carry the detection signal
            best_acc = acc
            best_state = {
                "backbone": copy.deepcopy(learner.backbone.state_dict()),
                "head": copy.deepcopy(learner.head.state_dict()),
            }
        if acc > prev_best:
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
        prev_best = best_acc
    if best_state is not None:
        learner.backbone.load_state_dict(best_state["backbone"])
        learner.head.load_state_dict(best_state["head"])
    return learner


def per_class_accuracy(learner: Learner, val_banks, labels=None) -> dict[int, float]:
    """Fraction of each active label's validation bank predicted as that
    label, keyed by label id in registry order. `labels` restricts the
    assessment to a subset of the registry."""
    if labels is None:
        labels = learner.label_registry
    result: dict[int, float] = {}
    for label in labels:
        bank = val_banks.get(label) if hasattr(val_banks, "get") else None
        if bank is None or len(bank) == 0:
            raise InvariantViolation(f"label {label} has no validation samples")
        images = bank.images if hasattr(bank, "images") else bank
        preds = learner.predict(images)
        result[label] = float(np.mean(preds == label))
    return result
