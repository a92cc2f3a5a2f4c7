"""Run orchestration: configs, the exposure loop, logging, checkpoints,
metric files, and plots.

A run is fully determined by one config plus a seed. Every processed
exposure appends one self-describing JSON record to the run log and
(optionally) refreshes a checkpoint, so an aborted run can be resumed
and replays byte-identically.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import yaml

from . import baselines as bl
from .datasets import (
    DATA_ROOT_ENV,
    Exposure,
    ExposureStream,
    LabeledImageSet,
    StreamConfig,
    load_dataset,
)
from .detector import DetectorConfig, novelty_score, process_exposure
from .errors import ConfigurationError
from .exemplars import ExemplarStore
from .learner import Learner, TrainConfig, build_learner
from .metrics import (
    LabelMap,
    ScoredStream,
    aupr,
    auroc,
    build_label_map,
    fpr_at_95_tpr,
    mapped_accuracy,
    unique_classes_learned,
)

logger = logging.getLogger(__name__)

METHODS = ("ilap_ci", "ilap_noci", "msp", "odin", "feature_distance", "supervised")

# method-specific detector defaults: (decision_threshold, imbalance_ratio)
ILAP_DEFAULTS = {"ilap_ci": (0.6, 0.5), "ilap_noci": (0.4, 0.0)}


@dataclass
class RunConfig:
    """Everything needed to reproduce one experiment."""

    dataset: str = "blobs2d"
    data_root: str | None = None
    dataset_params: dict = field(default_factory=dict)
    arch: str = "mlp"
    arch_params: dict = field(default_factory=dict)
    pretrained: bool = False
    method: str = "ilap_ci"
    output_dir: str = "runs/out"
    seeds: tuple[int, ...] = (0,)
    eval_every: int | None = None  # None: every exposure if <= 60, else every 5
    checkpoint: bool = True

    # stream section
    class_ids: tuple[int, ...] | None = None  # None: all dataset classes
    repeats_per_class: int = 3
    exposure_size: int = 200
    val_ratio: float = 0.8
    stream_seed: int | None = None  # None: follow the run seed
    schedule: tuple[int, ...] | None = None  # explicit class order override

    # detector section (None fields take method defaults)
    decision_threshold: float | None = None
    imbalance_ratio: float | None = None
    discard_floor: float = 0.2

    # train section
    epochs: int = 15
    batch_size: int = 16
    lr_head: float = 2e-4
    patience: int = 3
    weight_decay: float = 0.0

    # scorer section (odin)
    temperature: float = bl.ODIN_TEMPERATURE
    epsilon: float = bl.ODIN_EPSILON

    # store caps (None: exposure train/val sizes)
    cap_train: int | None = None
    cap_val: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(
                f"unknown method {self.method!r}; options: {METHODS}"
            )
        self.seeds = tuple(int(s) for s in self.seeds)

    # -- section-wise YAML round trip ---------------------------------

    _SECTIONS = {
        "run": ("dataset", "data_root", "dataset_params", "arch", "arch_params",
                "pretrained", "method", "output_dir", "seeds", "eval_every",
                "checkpoint"),
        "stream": ("class_ids", "repeats_per_class", "exposure_size", "val_ratio",
                   "stream_seed", "schedule"),
        "detector": ("decision_threshold", "imbalance_ratio", "discard_floor"),
        "train": ("epochs", "batch_size", "lr_head", "patience", "weight_decay"),
        "scorer": ("temperature", "epsilon"),
        "store": ("cap_train", "cap_val"),
    }

    def to_dict(self) -> dict:
        out: dict = {}
        for section, keys in self._SECTIONS.items():
            out[section] = {}
            for key in keys:
                value = getattr(self, key)
                if isinstance(value, tuple):
                    value = list(value)
                out[section][key] = value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        kwargs = {}
        known = {k for keys in cls._SECTIONS.values() for k in keys}
        for section, values in data.items():
            if section not in cls._SECTIONS:
                raise ConfigurationError(f"unknown config section {section!r}")
            for key, value in (values or {}).items():
                if key not in known:
                    raise ConfigurationError(f"unknown config key {section}.{key}")
                if isinstance(value, list):
                    value = tuple(value)
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def from_yaml(cls, path: str) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    def save_yaml(self, path: str):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    # -- resolved sub-configs ------------------------------------------

    def detector_config(self) -> DetectorConfig:
        theta, lam = ILAP_DEFAULTS.get(self.method, ILAP_DEFAULTS["ilap_ci"])
        if self.decision_threshold is not None:
            theta = self.decision_threshold
        if self.imbalance_ratio is not None:
            lam = self.imbalance_ratio
        return DetectorConfig(
            decision_threshold=theta,
            imbalance_ratio=lam,
            discard_floor=self.discard_floor,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            lr_head=self.lr_head, patience=self.patience,
            weight_decay=self.weight_decay,
        )

    def stream_config(self, dataset: LabeledImageSet, seed: int) -> StreamConfig:
        class_ids = self.class_ids
        if class_ids is None:
            class_ids = tuple(range(dataset.num_classes))
        return StreamConfig(
            class_ids=tuple(class_ids),
            repeats_per_class=self.repeats_per_class,
            exposure_size=self.exposure_size,
            val_ratio=self.val_ratio,
            seed=self.stream_seed if self.stream_seed is not None else seed,
        )

    def caps(self) -> tuple[int, int]:
        n_train = int(np.floor(self.exposure_size * self.val_ratio + 0.5))
        cap_train = self.cap_train if self.cap_train is not None else n_train
        cap_val = self.cap_val if self.cap_val is not None else self.exposure_size - n_train
        return cap_train, cap_val

    def run_dir(self, seed: int) -> str:
        return os.path.join(self.output_dir, self.method, f"seed{seed}")


class RunLog:
    """Append-only per-exposure event records, flushed per write."""

    def __init__(self, path: str | None = None, records: list[dict] | None = None):
        self.path = path
        self.records: list[dict] = list(records or [])
        self._fh = None
        if path is not None:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            self._fh = open(path, "w")
            for record in self.records:
                self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def append(self, record: dict):
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    @classmethod
    def load(cls, path: str) -> "RunLog":
        log = cls()
        log.path = path
        with open(path) as fh:
            log.records = [json.loads(line) for line in fh if line.strip()]
        return log

    # -- views ----------------------------------------------------------

    def events(self, kind: str) -> list[dict]:
        return [r for r in self.records if r.get("type") == kind]

    def exposures(self) -> list[dict]:
        return self.events("exposure")

    def final(self) -> dict | None:
        finals = self.events("final")
        return finals[-1] if finals else None

    def scored_stream(self) -> ScoredStream:
        """Novelty scores vs ground truth for detection metrics. The
        first exposure carries no detection decision for any method and
        is excluded, as are events without a score."""
        rows = [
            r for r in self.exposures()
            if r["index"] >= 1 and r.get("score") is not None
        ]
        return ScoredStream(
            scores=np.array([r["score"] for r in rows], dtype=np.float64),
            is_novel=np.array([r["is_novel_true"] for r in rows], dtype=bool),
        )

    def assignments(self) -> list[tuple[int, int]]:
        return [(r["assigned_label"], r["hidden_class"]) for r in self.exposures()]

    def active_labels(self) -> set[int]:
        rows = self.exposures()
        return set(rows[-1]["registry"]) if rows else set()

    def label_map(self) -> LabelMap:
        return build_label_map(self.assignments(), self.active_labels())

    def detection_f1(self, skip_first: bool = True) -> float:
        """F1 of the logged novel/repeated decisions against ground
        truth (novel positive)."""
        rows = self.exposures()
        if skip_first:
            rows = [r for r in rows if r["index"] >= 1]
        tp = sum(1 for r in rows if r["decision"] == "novel" and r["is_novel_true"])
        fp = sum(1 for r in rows if r["decision"] == "novel" and not r["is_novel_true"])
        fn = sum(1 for r in rows if r["decision"] != "novel" and r["is_novel_true"])
        denom = 2 * tp + fp + fn
        return 2 * tp / denom if denom else 0.0


def detection_f1_from_scores(stream: ScoredStream, threshold: float) -> float:
    """F1 when exposures scoring >= threshold are declared novel."""
    predicted = stream.scores >= threshold
    tp = int(np.sum(predicted & stream.is_novel))
    fp = int(np.sum(predicted & ~stream.is_novel))
    fn = int(np.sum(~predicted & stream.is_novel))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


# ---------------------------------------------------------------------------
# The exposure loop
# ---------------------------------------------------------------------------


class _RunState:
    """Mutable state carried across exposures of one run."""

    def __init__(self, config: RunConfig, seed: int):
        self.config = config
        self.seed = seed
        torch.manual_seed(seed)
        self.np_rng = np.random.default_rng(seed)
        self.torch_gen = torch.Generator().manual_seed(seed + 1)

        root = config.data_root or os.environ.get(DATA_ROOT_ENV, "./data")
        if config.dataset == "blobs2d":
            self.train_set, self.test_set = load_dataset(
                "blobs2d", **config.dataset_params
            )
        else:
            self.train_set, self.test_set = load_dataset(config.dataset, root=root)
        self.stream = ExposureStream(
            self.train_set,
            config.stream_config(self.train_set, seed),
            schedule=np.asarray(config.schedule) if config.schedule else None,
        )
        self.learner = build_learner(
            config.arch, self.train_set.image_shape,
            pretrained=config.pretrained, **config.arch_params,
        )
        cap_train, cap_val = config.caps()
        self.store = ExemplarStore(cap_train, cap_val)
        self.oracle = bl.OracleState()
        self.class_means = bl.ClassMeans()
        self.next_exposure = 0

    def rng_state(self) -> dict:
        return {
            "np": self.np_rng.bit_generator.state,
            "torch": self.torch_gen.get_state(),
        }

    def load_rng_state(self, state: dict):
        self.np_rng.bit_generator.state = state["np"]
        self.torch_gen.set_state(state["torch"])


def _evaluate_mapped(state: _RunState, log: RunLog) -> tuple[float, int]:
    label_map = build_label_map(log.assignments(), set(state.learner.label_registry))
    if not label_map.label_to_class:
        return 0.0, 0
    preds = state.learner.predict(state.test_set.images)
    acc = mapped_accuracy(preds, state.test_set.labels, label_map)
    return acc, unique_classes_learned(label_map)


def _score_exposure(state: _RunState, exposure: Exposure) -> float | None:
    """Novelty score of the current exposure under the configured
    baseline scorer, before any update; None when unscorable."""
    cfg = state.config
    if cfg.method in ("msp", "odin") and not state.learner.label_registry:
        return None
    if cfg.method == "msp":
        return bl.msp_score(state.learner, exposure.images)
    if cfg.method == "odin":
        return bl.odin_score(
            state.learner, exposure.images,
            temperature=cfg.temperature, epsilon=cfg.epsilon,
        )
    if cfg.method == "feature_distance":
        if not state.class_means.labels:
            return None
        return bl.feature_distance_score(
            state.learner, exposure.images, state.class_means
        )
    return None


def _step(state: _RunState, exposure: Exposure) -> dict:
    """Process one exposure under the configured method; returns the
    event record (without harness bookkeeping fields)."""
    cfg = state.config
    if cfg.method in ("ilap_ci", "ilap_noci"):
        state.learner, outcome, assigned, discarded = process_exposure(
            state.learner, state.store, exposure,
            cfg.detector_config(), cfg.train_config(),
            state.np_rng, state.torch_gen,
        )
        return {
            "decision": "novel" if outcome.decision.novel else "repeated",
            "assigned_label": int(assigned),
            "score": novelty_score(outcome),
            "drops": {int(l): float(d) for l, d in zip(outcome.labels, outcome.drops)},
            "pre_acc": {int(l): float(a) for l, a in zip(outcome.labels, outcome.pre_acc)},
            "post_acc": {int(l): float(a) for l, a in zip(outcome.labels, outcome.post_acc)},
            "discarded": [int(l) for l in discarded],
        }

    # scorer baselines and the supervised oracle share the oracle update
    score = _score_exposure(state, exposure)
    true_class = state.stream.hidden_class(exposure.index)
    seen = true_class in state.oracle.class_to_label
    assigned, discarded = bl.supervised_oracle_step(
        state.learner, state.store, exposure, true_class, state.oracle,
        cfg.train_config(), state.np_rng, state.torch_gen,
        discard_floor=cfg.discard_floor,
    )
    if cfg.method == "feature_distance":
        bl.feature_mean_update(
            state.class_means, state.learner, exposure.train.images, assigned
        )
        for label in discarded:
            state.class_means.remove(label)
    return {
        "decision": "repeated" if seen else "novel",
        "assigned_label": int(assigned),
        "score": None if score is None else float(score),
        "drops": None,
        "pre_acc": None,
        "post_acc": None,
        "discarded": [int(l) for l in discarded],
    }


def _write_checkpoint(state: _RunState, log: RunLog, path: str):
    payload = {
        "version": 1,
        "config": state.config.to_dict(),
        "seed": state.seed,
        "next_exposure": state.next_exposure,
        "learner": state.learner.state(),
        "store": state.store.state(),
        "oracle": dict(state.oracle.class_to_label),
        "class_means": state.class_means.state(),
        "rng": state.rng_state(),
        "n_records": len(log.records),
    }
    tmp = path + ".tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(config: RunConfig, path: str) -> _RunState:
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != 1:
        raise ConfigurationError("unknown checkpoint version")
    state = _RunState(config, payload["seed"])
    state.learner.load_state(payload["learner"])
    state.store = ExemplarStore.from_state(payload["store"], state.train_set)
    state.oracle = bl.OracleState({int(c): int(l) for c, l in payload["oracle"].items()})
    state.class_means = bl.ClassMeans.from_state(payload["class_means"])
    state.load_rng_state(payload["rng"])
    state.next_exposure = payload["next_exposure"]
    return state


def _final_metrics(state: _RunState, log: RunLog) -> dict:
    acc, unique = _evaluate_mapped(state, log)
    metrics = {
        "type": "final",
        "method": state.config.method,
        "dataset": state.config.dataset,
        "seed": state.seed,
        "mapped_accuracy": acc,
        "unique_classes_learned": unique,
        "classes_detected": len(state.learner.label_registry),
        "detection_f1": log.detection_f1(),
        "fpr95": None,
        "auroc": None,
        "aupr": None,
    }
    try:
        stream = log.scored_stream()
        metrics["fpr95"] = fpr_at_95_tpr(stream)
        metrics["auroc"] = auroc(stream)
        metrics["aupr"] = aupr(stream)
    except ValueError:
        pass  # degenerate stream (no scores, or one class only)
    return metrics


def _write_metrics_file(metrics: dict, path: str):
    with open(path, "w") as fh:
        for key, value in metrics.items():
            if key == "type":
                continue
            fh.write(f"{key} {value}\n")


def run_single(config: RunConfig, seed: int, resume_from: str | None = None) -> RunLog:
    """Execute (or resume) the exposure loop for one seed; writes the
    run log, a checkpoint per exposure, and the final metrics file."""
    run_dir = config.run_dir(seed)
    os.makedirs(run_dir, exist_ok=True)
    log_path = os.path.join(run_dir, "run_log.jsonl")
    ckpt_path = os.path.join(run_dir, "checkpoint.pt")

    if resume_from is not None:
        state = load_checkpoint(config, resume_from)
        old = RunLog.load(log_path)
        keep = [
            r for r in old.records
            if r.get("type") != "final" and r.get("index", -1) < state.next_exposure
        ]
        log = RunLog(log_path, records=keep)
    else:
        state = _RunState(config, seed)
        log = RunLog(log_path)

    n = len(state.stream)
    eval_every = config.eval_every or (1 if n <= 60 else 5)
    for i in range(state.next_exposure, n):
        exposure = state.stream.exposure(i)
        event = _step(state, exposure)
        event.update(
            type="exposure",
            index=i,
            hidden_class=state.stream.hidden_class(i),
            is_novel_true=state.stream.is_novel(i),
            registry=[int(l) for l in state.learner.label_registry],
            num_labels=int(state.learner.num_labels),
        )
        log.append(event)
        if i % eval_every == 0 or i == n - 1:
            acc, unique = _evaluate_mapped(state, log)
            log.append({
                "type": "eval", "index": i,
                "mapped_accuracy": acc,
                "classes_detected": len(state.learner.label_registry),
                "unique_classes": unique,
            })
        state.next_exposure = i + 1
        if config.checkpoint:
            _write_checkpoint(state, log, ckpt_path)

    metrics = _final_metrics(state, log)
    log.append(metrics)
    log.close()
    _write_metrics_file(metrics, os.path.join(run_dir, "metrics.txt"))
    return log


def run_experiment(config: RunConfig) -> list[RunLog]:
    """Run every seed in the config; emits run logs, metrics files, and
    the standard plots into the output directory."""
    os.makedirs(config.output_dir, exist_ok=True)
    config.save_yaml(os.path.join(config.output_dir, "config.yaml"))
    logs = []
    for seed in config.seeds:
        logger.info("run %s dataset=%s seed=%d", config.method, config.dataset, seed)
        logs.append(run_single(config, seed))
    emit_plots(logs, os.path.join(config.output_dir, "plots"))
    return logs


def resume_run(config: RunConfig, seed: int) -> RunLog:
    """Continue an interrupted run from its latest checkpoint."""
    ckpt = os.path.join(config.run_dir(seed), "checkpoint.pt")
    if not os.path.exists(ckpt):
        raise ConfigurationError(f"no checkpoint at {ckpt}")
    return run_single(config, seed, resume_from=ckpt)


# ---------------------------------------------------------------------------
# Cross-method OOD evaluation
# ---------------------------------------------------------------------------


def evaluate_ood(
    config: RunConfig, methods=None, reuse_logs: bool = True
) -> dict[str, dict[str, tuple[float, float]]]:
    """Score several methods on the identical exposure protocol and
    report FPR95 / AUROC / AUPR as mean +/- std across seeds.

    Returns {method: {metric: (mean, std)}} and writes an aligned table
    to output_dir/ood_table.txt. Methods without novelty scores (the
    supervised oracle) are skipped.
    """
    if len(config.seeds) < 2:
        logger.warning("single seed: std will be reported as 0")
    methods = list(methods or ["ilap_ci", "ilap_noci", "msp", "odin", "feature_distance"])
    table: dict[str, dict[str, tuple[float, float]]] = {}
    for method in methods:
        cfg = dataclasses.replace(config, method=method)
        per_seed = {"fpr95": [], "auroc": [], "aupr": []}
        for seed in config.seeds:
            log_path = os.path.join(cfg.run_dir(seed), "run_log.jsonl")
            if reuse_logs and os.path.exists(log_path):
                log = RunLog.load(log_path)
            else:
                log = run_single(cfg, seed)
            stream = log.scored_stream()
            if len(stream.scores) == 0:
                logger.warning("method %s emits no scores; skipped", method)
                break
            per_seed["fpr95"].append(fpr_at_95_tpr(stream))
            per_seed["auroc"].append(auroc(stream))
            per_seed["aupr"].append(aupr(stream))
        if per_seed["fpr95"]:
            table[method] = {
                k: (float(np.mean(v)), float(np.std(v))) for k, v in per_seed.items()
            }
    _write_ood_table(table, os.path.join(config.output_dir, "ood_table.txt"))
    return table


def _write_ood_table(table: dict, path: str):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    header = f"{'method':<18}{'FPR95':>14}{'AUROC':>14}{'AUPR':>14}"
    lines = [header, "-" * len(header)]
    for method, row in table.items():
        cells = [
            f"{row[k][0]:.3f}±{row[k][1]:.3f}" for k in ("fpr95", "auroc", "aupr")
        ]
        lines.append(f"{method:<18}{cells[0]:>14}{cells[1]:>14}{cells[2]:>14}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------


def _plot_backend():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def emit_plots(run_logs: list[RunLog], out_dir: str) -> list[str]:
    """Accuracy and classes-detected curves per run, plus the
    feature-distance drift plot when a run recorded distance scores.
    Returns the written file paths."""
    if not run_logs:
        raise ValueError("no run logs to plot")
    for log in run_logs:
        if not log.records:
            raise ValueError("empty run log")
    os.makedirs(out_dir, exist_ok=True)
    plt = _plot_backend()
    written = []

    def run_label(log: RunLog) -> str:
        final = log.final() or {}
        return f"{final.get('method', 'run')}-seed{final.get('seed', '?')}"

    for key, ylabel, fname in (
        ("mapped_accuracy", "mapped accuracy", "accuracy_curve.png"),
        ("classes_detected", "classes detected", "classes_detected.png"),
    ):
        fig, ax = plt.subplots(figsize=(6, 4))
        for log in run_logs:
            evals = log.events("eval")
            if not evals:
                continue
            xs = [e["index"] for e in evals]
            ys = [e[key] for e in evals]
            marker = "o" if len(xs) == 1 else None
            ax.plot(xs, ys, label=run_label(log), marker=marker)
        ax.set_xlabel("exposure")
        ax.set_ylabel(ylabel)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = os.path.join(out_dir, fname)
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    drift_logs = [
        log for log in run_logs
        if any(r.get("score") is not None and r.get("drops") is None
               for r in log.exposures())
    ]
    if drift_logs:
        fig, ax = plt.subplots(figsize=(6, 4))
        for log in drift_logs:
            rows = [r for r in log.exposures() if r.get("score") is not None]
            novel = [r for r in rows if r["is_novel_true"]]
            seen = [r for r in rows if not r["is_novel_true"]]
            ax.plot([r["index"] for r in seen], [r["score"] for r in seen],
                    "o-", label=f"{run_label(log)} learned", alpha=0.7)
            ax.plot([r["index"] for r in novel], [r["score"] for r in novel],
                    "s--", label=f"{run_label(log)} novel", alpha=0.7)
        ax.set_xlabel("exposure")
        ax.set_ylabel("min feature distance")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = os.path.join(out_dir, "feature_distance_drift.png")
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def plot_sweep(sweep, out_path: str) -> str:
    """Two-curve calibration plot: drop for repeated vs non-repeated
    classes across the imbalance grid."""
    plt = _plot_backend()
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(sweep.lambda_grid, sweep.drop_repeated, "o-", label="repeated class")
    ax.plot(sweep.lambda_grid, sweep.drop_nonrepeated, "s-", label="non-repeated classes")
    ax.set_xlabel("class-imbalance ratio")
    ax.set_ylabel("accuracy drop")
    ax.set_ylim(-0.05, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
