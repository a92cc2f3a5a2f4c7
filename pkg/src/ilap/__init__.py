"""Unsupervised class-incremental learning via detection-training
confusion, with competing OOD scorers and a benchmark harness."""

from .datasets import (
    Blobs2dConfig,
    Exposure,
    ExposureStream,
    LabeledImageSet,
    SampleBatch,
    StreamConfig,
    generate_schedule,
    load_dataset,
    make_blobs2d,
)
from .detector import (
    Decision,
    DetectionOutcome,
    DetectorConfig,
    accuracy_drops,
    decide,
    detection_train,
    novelty_score,
    process_exposure,
)
from .exemplars import (
    ExemplarStore,
    commit_exposure,
    discard_weak_classes,
    sample_imbalanced,
    select_representatives,
)
from .harness import RunConfig, RunLog, evaluate_ood, run_experiment, resume_run
from .learner import Learner, TrainConfig, build_learner, fit, per_class_accuracy
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

__version__ = "0.1.0"
