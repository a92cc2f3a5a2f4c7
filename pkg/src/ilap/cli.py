"""Command-line entry points: run, sweep, ood-eval, plot, resume.

Every verb takes a YAML config; individual fields can be overridden
with flags. The dataset root defaults to the ILAP_DATA_ROOT environment
variable.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import yaml

from .calibration import SweepResult, run_imbalance_sweep, select_lambda_theta
from .datasets import load_dataset
from .harness import RunConfig, RunLog, emit_plots, evaluate_ood, plot_sweep, resume_run, run_experiment
from .learner import TrainConfig


def _add_overrides(parser: argparse.ArgumentParser):
    parser.add_argument("--config", required=True, help="YAML run config")
    parser.add_argument("--method", help="override run.method")
    parser.add_argument("--dataset", help="override run.dataset")
    parser.add_argument("--arch", help="override run.arch")
    parser.add_argument("--pretrained", action="store_true", default=None)
    parser.add_argument("--output-dir", help="override run.output_dir")
    parser.add_argument("--seeds", type=int, nargs="+", help="override run.seeds")
    parser.add_argument("--exposure-size", type=int)
    parser.add_argument("--repeats-per-class", type=int)
    parser.add_argument("--decision-threshold", type=float)
    parser.add_argument("--imbalance-ratio", type=float)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--data-root", help="dataset root (or set ILAP_DATA_ROOT)")


def _load_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.from_yaml(args.config)
    for flag, attr in (
        ("method", "method"), ("dataset", "dataset"), ("arch", "arch"),
        ("pretrained", "pretrained"), ("output_dir", "output_dir"),
        ("seeds", "seeds"), ("exposure_size", "exposure_size"),
        ("repeats_per_class", "repeats_per_class"),
        ("decision_threshold", "decision_threshold"),
        ("imbalance_ratio", "imbalance_ratio"), ("epochs", "epochs"),
        ("data_root", "data_root"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(config, attr, tuple(value) if isinstance(value, list) else value)
    return config


def _cmd_run(args) -> int:
    config = _load_config(args)
    logs = run_experiment(config)
    for log in logs:
        final = log.final()
        print(
            f"[{config.method} seed={final['seed']}] "
            f"mapped_accuracy={final['mapped_accuracy']:.4f} "
            f"classes={final['classes_detected']} "
            f"unique={final['unique_classes_learned']}"
        )
    return 0


def _cmd_sweep(args) -> int:
    config = _load_config(args)
    with open(args.config) as fh:
        raw = yaml.safe_load(fh) or {}
    sweep_cfg = raw.get("sweep", {})
    dataset, _ = (
        load_dataset("blobs2d", **config.dataset_params)
        if config.dataset == "blobs2d"
        else load_dataset(config.dataset, root=config.data_root)
    )
    result = run_imbalance_sweep(
        dataset,
        config.arch,
        lambda_grid=sweep_cfg.get("lambda_grid", [0.0, 0.25, 0.5, 0.75]),
        trials=sweep_cfg.get("trials", 5),
        seed=config.seeds[0],
        base_classes=sweep_cfg.get("base_classes", 2),
        exposure_size=sweep_cfg.get("exposure_size", config.exposure_size),
        train_cfg=config.train_config(),
        **config.arch_params,
    )
    os.makedirs(config.output_dir, exist_ok=True)
    out = os.path.join(config.output_dir, "sweep.yaml")
    with open(out, "w") as fh:
        yaml.safe_dump(result.to_dict(), fh)
    plot_sweep(result, os.path.join(config.output_dir, "sweep_curves.png"))
    ratio, threshold = select_lambda_theta(result)
    print(f"selected imbalance_ratio={ratio} decision_threshold={threshold:.3f}")
    print(f"sweep written to {out}")
    return 0


def _cmd_ood_eval(args) -> int:
    config = _load_config(args)
    methods = args.methods or None
    table = evaluate_ood(config, methods=methods, reuse_logs=not args.rerun)
    path = os.path.join(config.output_dir, "ood_table.txt")
    with open(path) as fh:
        print(fh.read(), end="")
    return 0


def _cmd_plot(args) -> int:
    logs = [RunLog.load(p) for p in args.run_logs]
    written = emit_plots(logs, args.out)
    for path in written:
        print(path)
    return 0


def _cmd_resume(args) -> int:
    config = _load_config(args)
    for seed in args.seeds or config.seeds:
        log = resume_run(config, seed)
        final = log.final()
        print(
            f"[resumed {config.method} seed={seed}] "
            f"mapped_accuracy={final['mapped_accuracy']:.4f}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ilap",
        description="unsupervised class-incremental learning benchmark harness",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute the exposure loop")
    _add_overrides(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="imbalance-ratio calibration sweep")
    _add_overrides(p_sweep)
    p_sweep.set_defaults(func=_cmd_sweep)

    p_ood = sub.add_parser("ood-eval", help="FPR95/AUROC/AUPR table across methods")
    _add_overrides(p_ood)
    p_ood.add_argument("--methods", nargs="+", help="methods to compare")
    p_ood.add_argument("--rerun", action="store_true", help="ignore cached run logs")
    p_ood.set_defaults(func=_cmd_ood_eval)

    p_plot = sub.add_parser("plot", help="re-render plots from run logs")
    p_plot.add_argument("--run-logs", nargs="+", required=True)
    p_plot.add_argument("--out", default="plots")
    p_plot.set_defaults(func=_cmd_plot)

    p_resume = sub.add_parser("resume", help="continue from the latest checkpoint")
    _add_overrides(p_resume)
    p_resume.set_defaults(func=_cmd_resume)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
