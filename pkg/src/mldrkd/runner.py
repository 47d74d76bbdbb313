"""Experiment orchestration: dataset + teacher + student training for one
resolved configuration, with all artifacts written to a run directory.

This layer is what both the CLI `run` subcommand and grid-cell workers
execute; it must stay importable and picklable-friendly for spawned
processes.
"""

import os

import numpy as np

from .autodiff import Tensor
from .config import _resolve_values, dump_resolved
from .data import generate, stratified_split
from .errors import ConfigError, DataError
from .losses import softmax_probs
from .models import build_model, load_model_state, save_model
from .train import evaluate, train, write_metrics_csv, write_summary


def make_splits(cfg):
    ds = generate(cfg.synth)
    return stratified_split(ds, cfg.eval_fraction, cfg.split_seed)


def pretrain_teacher(cfg, train_ds, eval_ds, out_path=None):
    """Train the teacher spec on the same splits; returns (frozen model, record)."""
    record, teacher, _ = train(cfg.teacher_train, cfg.teacher_spec, None, train_ds, eval_ds)
    teacher.freeze()
    if out_path is not None:
        save_model(out_path, teacher)
    return teacher, record


def obtain_teacher(cfg, train_ds, eval_ds, out_dir=None):
    """Load the configured teacher checkpoint, or pretrain one if absent.

    Returns (teacher model or None, teacher eval accuracy or None).
    """
    if not cfg.train.needs_teacher:
        return None, None
    if cfg.teacher_checkpoint is not None:
        teacher = build_model(cfg.teacher_spec, seed=0)
        load_model_state(teacher, cfg.teacher_checkpoint)
        teacher.freeze()
        return teacher, evaluate(teacher, eval_ds)
    out_path = os.path.join(out_dir, "teacher.ckpt") if out_dir else None
    teacher, record = pretrain_teacher(cfg, train_ds, eval_ds, out_path)
    return teacher, record.final_acc


def run_experiment(values, out_dir=None):
    """Execute one fully resolved experiment; returns a summary dict.

    When out_dir is given it receives: resolved.cfg, metrics.csv,
    summary.json, student.ckpt (+ msdf.ckpt, teacher.ckpt as applicable).
    """
    cfg = _resolve_values(values)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "resolved.cfg"), "w") as f:
            f.write(dump_resolved(values))
    train_ds, eval_ds = make_splits(cfg)
    teacher, teacher_acc = obtain_teacher(cfg, train_ds, eval_ds, out_dir)
    record, student, msdf_params = train(
        cfg.train, cfg.student_spec, teacher, train_ds, eval_ds, out_dir=out_dir
    )
    extra = {"teacher_acc": teacher_acc}
    if out_dir is not None:
        write_metrics_csv(record, cfg.train, os.path.join(out_dir, "metrics.csv"))
        write_summary(record, cfg.train, os.path.join(out_dir, "summary.json"), extra=extra)
    return {
        "final_acc": record.final_acc,
        "best_acc": record.best_acc,
        "teacher_acc": teacher_acc,
        "record": record,
        "student": student,
        "msdf_params": msdf_params,
        "config": cfg,
    }


def averaged_prediction(cfg, student, eval_ds, category):
    """Mean softmax distribution over the eval samples of one category."""
    if not 0 <= category < eval_ds.n_classes:
        raise DataError(f"category {category} outside [0, {eval_ds.n_classes})")
    mask = eval_ds.labels == category
    if not mask.any():
        raise DataError(f"category {category} has no samples in the eval split")
    logits = student.forward(Tensor(eval_ds.inputs[mask])).logits
    probs = softmax_probs(logits, 1.0).data
    return probs.mean(axis=0)


def pred_dist_from_checkpoint(values, checkpoint_path, category):
    """Rebuild the student from a checkpoint and average its eval predictions."""
    cfg = _resolve_values(values)
    _, eval_ds = make_splits(cfg)
    student = build_model(cfg.student_spec, seed=0)
    load_model_state(student, checkpoint_path)
    return averaged_prediction(cfg, student, eval_ds, category), eval_ds
