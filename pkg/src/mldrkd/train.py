"""Deterministic training loop composing label, logit-level, and
feature-level alignment losses.

The per-step objective is assembled from five additive components, each
logged separately so their sum always reconstructs the total exactly:

  loss_ce       label cross-entropy on the student's final logits
  loss_class    class-wise relation alignment at the logit level
  loss_sample   sample-wise relation alignment at the logit level
  loss_kl       weighted plain softened-KL at the logit level
  loss_balance  weighted feature-level alignment of fused stage logits

Named methods are presets over two primitive switches: logit_kind
(off | kd | dfra) and feature_kind (off | mean | msdf), where "mean"
replaces gated fusion with an equal-weight average of per-stage
alignment losses.  All randomness derives from one root seed through a
hash-based splitting scheme, so runs are bit-reproducible on a platform
and grid cells can run in parallel without sharing state.
"""

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tape, Tensor, add, backward, mul
from .data import batches
from .errors import ConfigError, ContractError, TrainingAborted
from .fusion import extract_token, fuse_stages, init_msdf_params, project_stage
from .losses import (
    DistillHyperparams,
    _directed_kl,
    cross_entropy,
    dfra_loss,
    dfra_terms,
    softmax_probs,
)
from .models import build_model, save_checkpoint, save_model, stage_shapes

METHODS = ("ce_only", "vanilla_kd", "dfra_logit_only", "mldr_full", "custom")
LOGIT_KINDS = ("off", "kd", "dfra")
FEATURE_KINDS = ("off", "mean", "msdf")
OPTIMIZERS = ("auto", "sgd", "adamw")

METRICS_COLUMNS = [
    "epoch",
    "loss_ce",
    "loss_class",
    "loss_sample",
    "loss_kl",
    "loss_balance",
    "loss_total",
    "eval_acc",
    "gate_mean_1",
    "gate_mean_2",
    "gate_mean_3",
    "gate_mean_4",
]


def derive_seed(root, *tags):
    """Deterministic child seed from a root seed and a tag path."""
    key = "/".join([str(int(root))] + [str(t) for t in tags])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def cosine_lr(step, total_steps, base_lr):
    """Half-cosine decay from base_lr at step 0 to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class TrainConfig:
    """Complete declarative description of one training run."""

    base_lr: float
    epochs: int
    batch_size: int
    seed: int
    method: str = "mldr_full"
    optimizer: str = "auto"
    temperature: float = 4.0
    lam: float = 1.0
    kd_lam: Optional[float] = None  # weight of the plain-KL term; defaults to lam
    mu: float = 1.0
    use_cwrd: bool = True
    use_swrd: bool = True
    kl_direction: str = "student_first"
    sample_scale: str = "categories"
    t2_scale: bool = False
    kd_t2_scale: bool = True
    ce_mean: bool = False
    n_stages_used: int = 4
    d_tok: int = 16
    h_gate: Optional[int] = None
    logit_kind: Optional[str] = None
    feature_kind: Optional[str] = None
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    eval_batch_size: int = 256

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        defaults = {
            "ce_only": ("off", "off"),
            "vanilla_kd": ("kd", "off"),
            "dfra_logit_only": ("dfra", "off"),
            "mldr_full": ("dfra", "msdf"),
        }
        if self.method != "custom":
            want_logit, want_feature = defaults[self.method]
            if self.logit_kind is None:
                self.logit_kind = want_logit
            if self.feature_kind is None:
                self.feature_kind = want_feature
            if self.logit_kind != want_logit or self.feature_kind != want_feature:
                raise ConfigError(
                    f"method {self.method!r} implies logit_kind={want_logit!r}, "
                    f"feature_kind={want_feature!r}; got {self.logit_kind!r}, "
                    f"{self.feature_kind!r} (use method='custom' for free combinations)"
                )
        else:
            if self.logit_kind is None or self.feature_kind is None:
                raise ConfigError("method 'custom' requires explicit logit_kind and feature_kind")
        if self.logit_kind not in LOGIT_KINDS:
            raise ConfigError(f"logit_kind must be one of {LOGIT_KINDS}, got {self.logit_kind!r}")
        if self.feature_kind not in FEATURE_KINDS:
            raise ConfigError(f"feature_kind must be one of {FEATURE_KINDS}, got {self.feature_kind!r}")
        if not 0 <= self.n_stages_used <= 4:
            raise ConfigError(f"n_stages_used must be 0..4, got {self.n_stages_used}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.base_lr < 0:
            raise ConfigError(f"base_lr must be nonnegative, got {self.base_lr}")
        # build once to validate the loss hyperparameters early
        self.hyperparams()

    def hyperparams(self):
        return DistillHyperparams(
            temperature=self.temperature,
            lam=self.lam,
            use_cwrd=self.use_cwrd,
            use_swrd=self.use_swrd,
            kl_direction=self.kl_direction,
            sample_scale=self.sample_scale,
            t2_scale=self.t2_scale,
        )

    @property
    def needs_teacher(self):
        return self.logit_kind != "off" or (self.feature_kind != "off" and self.n_stages_used > 0)


@dataclass
class EpochStats:
    epoch: int
    loss_ce: float
    loss_class: float
    loss_sample: float
    loss_kl: float
    loss_balance: float
    loss_total: float
    eval_acc: float
    gate_means: tuple = ()


@dataclass
class RunRecord:
    epochs: list = field(default_factory=list)
    final_acc: float = 0.0
    best_acc: float = 0.0
    n_steps: int = 0
    wall_time_s: float = 0.0


class SGD:
    """Momentum SGD; weight decay folds into the gradient (L2 style)."""

    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self._params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buf = {name: np.zeros_like(p.data) for name, p in self._params}

    def zero_grad(self):
        for _, p in self._params:
            p.grad = None

    def step(self, lr):
        for name, p in self._params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf = self._buf[name]
            buf *= self.momentum
            buf += g
            p.data = p.data - lr * buf


class AdamW:
    """Adam with decoupled weight decay and bias correction."""

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self._params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = {name: np.zeros_like(p.data) for name, p in self._params}
        self._v = {name: np.zeros_like(p.data) for name, p in self._params}
        self._t = 0

    def zero_grad(self):
        for _, p in self._params:
            p.grad = None

    def step(self, lr):
        self._t += 1
        c1 = 1.0 - self.b1**self._t
        c2 = 1.0 - self.b2**self._t
        for name, p in self._params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                p.data = p.data - lr * self.weight_decay * p.data
            m = self._m[name]
            v = self._v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _clip_grads(params, max_norm):
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def evaluate(model, ds, batch_size=256):
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if len(ds) == 0:
        raise ConfigError("cannot evaluate on an empty split")
    correct = 0
    bs = min(batch_size, len(ds))
    for x, labels in batches(ds, bs, seed=0, shuffle=False):
        logits = model.forward(x).logits.data
        correct += int((np.argmax(logits, axis=1) == labels).sum())
    return correct / len(ds)


def _mean_feature_loss(stages, params, z_t, hp):
    """Equal-weight average of per-stage alignment losses (fusion ablated)."""
    total = None
    for out, sp in zip(stages, params.stages):
        _, feats = extract_token(out.features, out.arch_kind, sp)
        term = dfra_loss(project_stage(feats, sp), z_t, hp)
        total = term if total is None else add(total, term)
    return mul(total, 1.0 / len(stages))


def train(cfg, student_spec, teacher, train_ds, eval_ds, out_dir=None):
    """Run one full training; returns (RunRecord, student, msdf_params).

    teacher must be a frozen model when any teacher-dependent term is
    active, and may be None otherwise.  out_dir, when given, receives
    student.ckpt (and msdf.ckpt when fusion parameters exist).
    """
    t_start = time.perf_counter()
    hp = cfg.hyperparams()
    if cfg.needs_teacher:
        if teacher is None:
            raise ConfigError(f"method {cfg.method!r} needs a teacher model")
        if teacher.spec.n_classes != student_spec.n_classes:
            raise ConfigError(
                f"teacher has {teacher.spec.n_classes} classes, student {student_spec.n_classes}"
            )
        if teacher.spec.input_shape != student_spec.input_shape:
            raise ConfigError(
                f"teacher input {teacher.spec.input_shape} != student input {student_spec.input_shape}"
            )
    if cfg.feature_kind != "off" and cfg.n_stages_used > student_spec.n_stages:
        raise ConfigError(
            f"n_stages_used={cfg.n_stages_used} exceeds student stages {student_spec.n_stages}"
        )
    if train_ds.n_classes != student_spec.n_classes:
        raise ConfigError(
            f"dataset has {train_ds.n_classes} classes, student expects {student_spec.n_classes}"
        )

    student = build_model(student_spec, derive_seed(cfg.seed, "student-init"))
    use_feature = cfg.feature_kind != "off" and cfg.n_stages_used > 0
    msdf_params = None
    if use_feature:
        shapes = stage_shapes(student_spec)[-cfg.n_stages_used :]
        msdf_params = init_msdf_params(
            shapes,
            student_spec.arch_kind,
            student_spec.n_classes,
            cfg.d_tok,
            np.random.default_rng(derive_seed(cfg.seed, "msdf-init")),
            h_gate=cfg.h_gate,
        )

    all_params = student.parameters() + (msdf_params.parameters() if msdf_params else [])
    opt_name = cfg.optimizer
    if opt_name == "auto":
        opt_name = "sgd" if student_spec.arch_kind == "spatial" else "adamw"
    if opt_name == "sgd":
        opt = SGD(all_params, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    else:
        opt = AdamW(all_params, weight_decay=cfg.weight_decay)

    kd_lam = cfg.lam if cfg.kd_lam is None else cfg.kd_lam
    kd_scale = kd_lam * (cfg.temperature**2 if cfg.kd_t2_scale else 1.0)
    n_batches = math.ceil(len(train_ds) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    record = RunRecord()
    step = 0
    zero = Tensor(0.0)

    for epoch in range(cfg.epochs):
        sums = np.zeros(6)  # ce, class, sample, kl, balance, total
        gate_sum = np.zeros(cfg.n_stages_used) if use_feature and cfg.feature_kind == "msdf" else None
        gate_batches = 0
        for x, labels in batches(
            train_ds, cfg.batch_size, derive_seed(cfg.seed, "batches", epoch), shuffle=True
        ):
            z_t = teacher.forward(x).logits.detach() if cfg.needs_teacher else None
            with Tape() as tape:
                result = student.forward(x)
                if not np.isfinite(result.logits.data).all():
                    raise TrainingAborted(
                        f"non-finite student logits at epoch {epoch} step {step}; "
                        f"the run diverged (base_lr={cfg.base_lr:g})"
                    )
                l_ce = cross_entropy(result.logits, labels, mean=cfg.ce_mean)
                l_class = l_sample = l_kl = l_balance = zero
                if cfg.logit_kind == "kd":
                    kl = _directed_kl(
                        softmax_probs(result.logits, cfg.temperature),
                        softmax_probs(z_t, cfg.temperature),
                        cfg.kl_direction,
                    )
                    l_kl = mul(kl, kd_scale)
                elif cfg.logit_kind == "dfra":
                    terms = dfra_terms(result.logits, z_t, hp)
                    l_class = terms.class_term
                    l_sample = terms.sample_term
                    scale = hp.lam * (hp.temperature**2 if hp.t2_scale else 1.0)
                    l_kl = mul(terms.logit_kl, scale)
                if use_feature:
                    used = result.stages[-cfg.n_stages_used :]
                    if cfg.feature_kind == "msdf":
                        fused = fuse_stages(used, msdf_params)
                        l_balance = mul(dfra_loss(fused.values, z_t, hp), cfg.mu)
                        gate_sum += fused.gate_weights.data.mean(axis=0)
                        gate_batches += 1
                    else:
                        l_balance = mul(
                            _mean_feature_loss(used, msdf_params, z_t, hp), cfg.mu
                        )
                total = add(add(add(add(l_ce, l_class), l_sample), l_kl), l_balance)
            vals = [t.item() for t in (l_ce, l_class, l_sample, l_kl, l_balance, total)]
            if not all(np.isfinite(v) for v in vals):
                raise TrainingAborted(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"ce={vals[0]:.6g} class={vals[1]:.6g} sample={vals[2]:.6g} "
                    f"kl={vals[3]:.6g} balance={vals[4]:.6g}"
                )
            opt.zero_grad()
            backward(total, tape)
            if cfg.grad_clip > 0:
                _clip_grads(all_params, cfg.grad_clip)
            opt.step(cosine_lr(step, total_steps, cfg.base_lr))
            step += 1
            sums += vals
        acc = evaluate(student, eval_ds, cfg.eval_batch_size)
        means = sums / n_batches
        gate_means = (
            tuple(float(g) for g in gate_sum / gate_batches)
            if gate_sum is not None and gate_batches
            else ()
        )
        record.epochs.append(
            EpochStats(epoch, *(float(v) for v in means), acc, gate_means)
        )
    record.final_acc = record.epochs[-1].eval_acc
    record.best_acc = max(e.eval_acc for e in record.epochs)
    record.n_steps = step
    record.wall_time_s = time.perf_counter() - t_start
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_model(os.path.join(out_dir, "student.ckpt"), student)
        if msdf_params is not None:
            save_checkpoint(os.path.join(out_dir, "msdf.ckpt"), msdf_params.parameters())
    return record, student, msdf_params


def _fmt(v):
    return repr(float(v))


def write_metrics_csv(record, cfg, path):
    """One row per epoch, fixed column order; wall time deliberately excluded
    so identical runs produce byte-identical files."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        for e in record.epochs:
            gates = list(e.gate_means) + [""] * (4 - len(e.gate_means))
            writer.writerow(
                [
                    e.epoch,
                    _fmt(e.loss_ce),
                    _fmt(e.loss_class),
                    _fmt(e.loss_sample),
                    _fmt(e.loss_kl),
                    _fmt(e.loss_balance),
                    _fmt(e.loss_total),
                    _fmt(e.eval_acc),
                ]
                + [_fmt(g) if g != "" else "" for g in gates]
            )


def write_summary(record, cfg, path, extra=None):
    """Final metrics + the exact resolved config (+ wall time, which may vary)."""
    payload = {
        "final_acc": record.final_acc,
        "best_acc": record.best_acc,
        "n_epochs": len(record.epochs),
        "n_steps": record.n_steps,
        "wall_time_s": record.wall_time_s,
        "config": asdict(cfg),
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
