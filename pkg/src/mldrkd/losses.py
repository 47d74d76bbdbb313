"""Distillation losses: CE/KL/vanilla-KD plus the decoupled relation losses.

Logit batches are plain 2-d Tensors of shape B x N (B >= 1 samples,
N >= 2 categories); every public op validates that contract on entry.
Teacher logits are detached at the loss boundary: no gradient is ever
produced for them.

The relation losses decouple one logit batch into two row-stochastic
relation stacks:

  class-wise  (B x N x N): per sample, how each category's logit relates
      to every other category's logit;
  sample-wise (N x B x B): per category, how each sample's logit relates
      to every other sample's logit.

Both are built from scaled outer products of z/T followed by a row
softmax, and student/teacher stacks are aligned by averaging row-wise KL
divergence over all rows.
"""

import math
import os
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    div,
    matmul,
    mul,
    neg,
    reshape,
    softmax,
    sub,
    tlog,
    tmean,
    transpose,
    tsum,
)
from .errors import ConfigError, ContractError, DataError, ShapeError

KL_DIRECTIONS = ("student_first", "teacher_first")
SAMPLE_SCALES = ("categories", "batch")

# extra consistency checks (pre-softmax symmetry) on relation construction
DEBUG_CHECKS = os.environ.get("MLDRKD_DEBUG", "") == "1"


@dataclass
class DistillHyperparams:
    """Knobs shared by the relation losses and their plain-KL companion.

    temperature: soft factor applied to logits before every softmax here.
    lam: weight of the plain softened-KL term.
    use_cwrd / use_swrd: ablation switches for the class-wise and
        sample-wise relation terms.
    kl_direction: "student_first" puts the student distribution in the
        first KL slot (the default); "teacher_first" is the conventional
        distillation orientation.
    sample_scale: pre-softmax divisor for the sample-wise relation;
        "categories" divides by sqrt(N) (the default), "batch" by sqrt(B).
    t2_scale: multiply the plain-KL term by temperature**2 to compensate
        the softened-gradient shrinkage; off by default.
    """

    temperature: float = 4.0
    lam: float = 1.0
    use_cwrd: bool = True
    use_swrd: bool = True
    kl_direction: str = "student_first"
    sample_scale: str = "categories"
    t2_scale: bool = False

    def __post_init__(self):
        _check_temperature(self.temperature)
        if self.lam < 0:
            raise ConfigError(f"lam must be nonnegative, got {self.lam}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ConfigError(f"kl_direction must be one of {KL_DIRECTIONS}, got {self.kl_direction!r}")
        if self.sample_scale not in SAMPLE_SCALES:
            raise ConfigError(f"sample_scale must be one of {SAMPLE_SCALES}, got {self.sample_scale!r}")


@dataclass
class RelationTensor:
    """Row-stochastic relation stack plus which decoupling produced it."""

    values: Tensor  # B x N x N (class-wise) or N x B x B (sample-wise)
    kind: str  # "class-wise" | "sample-wise"


@dataclass
class DfraTerms:
    """Component breakdown of the relation loss; total is what trains."""

    class_term: Tensor
    sample_term: Tensor
    logit_kl: Tensor  # unweighted softened KL between student and teacher
    total: Tensor


def _check_temperature(t):
    if not t > 0:
        raise ConfigError(f"temperature must be positive, got {t}")


def as_logit_batch(z):
    """Validate a B x N logit batch (B >= 1, N >= 2, finite values)."""
    t = z if isinstance(z, Tensor) else Tensor(z)
    if t.data.ndim != 2:
        raise ShapeError(f"logit batch must be 2-d (B, N), got shape {t.data.shape}")
    b, n = t.data.shape
    if b < 1 or n < 2:
        raise ContractError(f"logit batch needs B >= 1 and N >= 2, got B={b}, N={n}")
    if not np.all(np.isfinite(t.data)):
        raise ContractError("logit batch contains non-finite values")
    return t


def softmax_probs(z, temperature):
    """Row-wise softmax of z / temperature."""
    _check_temperature(temperature)
    z = as_logit_batch(z)
    return softmax(div(z, float(temperature)), axis=-1)


def cross_entropy(z_s, labels, *, mean=False):
    """Label cross-entropy, summed over the batch (mean=True averages instead)."""
    z = as_logit_batch(z_s)
    b, n = z.data.shape
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise DataError(f"labels must have shape ({b},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.min() < 0 or labels.max() >= n:
        raise DataError(f"labels must lie in [0, {n}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((b, n))
    onehot[np.arange(b), labels] = 1.0
    logp = tlog(softmax(z, axis=-1))
    loss = neg(tsum(mul(logp, Tensor(onehot))))
    return div(loss, float(b)) if mean else loss


def kl_divergence(p, q):
    """Batch-mean KL divergence sum_j p_ij log(p_ij / q_ij) over probability rows."""
    for name, t in (("p", p), ("q", q)):
        if t.data.ndim != 2:
            raise ShapeError(f"kl_divergence: {name} must be 2-d, got {t.data.shape}")
        rowsum = t.data.sum(axis=-1)
        if np.abs(rowsum - 1.0).max() > 1e-6:
            raise ContractError(f"kl_divergence: rows of {name} are not normalized (max drift {np.abs(rowsum - 1.0).max():.3g})")
    if p.data.shape != q.data.shape:
        raise ShapeError(f"kl_divergence: shapes differ, {p.data.shape} vs {q.data.shape}")
    elem = mul(p, sub(tlog(p), tlog(q)))
    return tmean(tsum(elem, axis=-1))


def _directed_kl(p_s, p_t, direction):
    if direction == "student_first":
        return kl_divergence(p_s, p_t)
    if direction == "teacher_first":
        return kl_divergence(p_t, p_s)
    raise ConfigError(f"kl_direction must be one of {KL_DIRECTIONS}, got {direction!r}")


def vanilla_kd_loss(z_s, z_t, labels, temperature, lam, *, t2_scale=True, kl_direction="student_first", ce_mean=False):
    """Classical distillation objective: CE plus weighted softened KL.

    The KL term carries the temperature**2 compensation by default so
    its gradient scale stays comparable across temperatures; pass
    t2_scale=False for the bare sum.
    """
    z_s = as_logit_batch(z_s)
    z_t = as_logit_batch(z_t).detach()
    if z_s.data.shape != z_t.data.shape:
        raise ShapeError(f"student/teacher logit shapes differ: {z_s.data.shape} vs {z_t.data.shape}")
    ce = cross_entropy(z_s, labels, mean=ce_mean)
    kl = _directed_kl(softmax_probs(z_s, temperature), softmax_probs(z_t, temperature), kl_direction)
    scale = float(lam) * (float(temperature) ** 2 if t2_scale else 1.0)
    return add(ce, mul(kl, scale))


def _outer_relation(rows, divisor, debug):
    """Row softmax of (v v^T) / divisor for each leading-slice vector v."""
    s, d = rows.data.shape[0], rows.data.shape[1]
    left = reshape(rows, (s, d, 1))
    right = reshape(rows, (s, 1, d))
    pre = div(matmul(left, right), divisor)
    if debug:
        sym = np.abs(pre.data - pre.data.transpose(0, 2, 1)).max()
        if sym != 0.0:
            raise ContractError(f"pre-softmax relation matrix asymmetric by {sym:.3g}")
    return softmax(pre, axis=-1)


def class_wise_relation(z, temperature, *, debug=None):
    """Per-sample category-to-category relation stack, shape B x N x N.

    Entry (b, i, j) before the row softmax is z_bi * z_bj / (T^2 * sqrt(N)).
    """
    _check_temperature(temperature)
    z = as_logit_batch(z)
    n = z.data.shape[1]
    zt = div(z, float(temperature))
    vals = _outer_relation(zt, math.sqrt(n), DEBUG_CHECKS if debug is None else debug)
    return RelationTensor(vals, "class-wise")


def sample_wise_relation(z, temperature, *, scale="categories", debug=None):
    """Per-category sample-to-sample relation stack, shape N x B x B.

    Entry (n, a, b) before the row softmax is z_an * z_bn / (T^2 * sqrt(N)).
    The sqrt(N) divisor is the default even though the matrix is B x B;
    scale="batch" switches it to sqrt(B).
    """
    _check_temperature(temperature)
    z = as_logit_batch(z)
    b, n = z.data.shape
    if scale == "categories":
        divisor = math.sqrt(n)
    elif scale == "batch":
        divisor = math.sqrt(b)
    else:
        raise ConfigError(f"sample_scale must be one of {SAMPLE_SCALES}, got {scale!r}")
    zt = transpose(div(z, float(temperature)))
    vals = _outer_relation(zt, divisor, DEBUG_CHECKS if debug is None else debug)
    return RelationTensor(vals, "sample-wise")


def relation_alignment(r_s, r_t, *, kl_direction="student_first"):
    """Arithmetic mean over all rows of row-wise KL between two relation stacks."""
    if r_s.values.data.shape != r_t.values.data.shape:
        raise ShapeError(
            f"relation shapes differ: {r_s.values.data.shape} vs {r_t.values.data.shape}"
        )
    if r_s.kind != r_t.kind:
        raise ContractError(f"cannot align {r_s.kind} against {r_t.kind}")
    if kl_direction == "student_first":
        a, b = r_s.values, r_t.values
    elif kl_direction == "teacher_first":
        a, b = r_t.values, r_s.values
    else:
        raise ConfigError(f"kl_direction must be one of {KL_DIRECTIONS}, got {kl_direction!r}")
    elem = mul(a, sub(tlog(a), tlog(b)))
    return tmean(tsum(elem, axis=-1))


def dfra_terms(z_s, z_t, hp):
    """Relation-loss components for one student/teacher logit pair.

    total = class_term + sample_term + lam * logit_kl (the latter scaled
    by T^2 when hp.t2_scale).  Disabled terms contribute exact zeros.
    """
    z_s = as_logit_batch(z_s)
    z_t = as_logit_batch(z_t).detach()
    if z_s.data.shape != z_t.data.shape:
        raise ShapeError(f"student/teacher logit shapes differ: {z_s.data.shape} vs {z_t.data.shape}")
    t = hp.temperature
    if hp.use_cwrd:
        class_term = relation_alignment(
            class_wise_relation(z_s, t),
            class_wise_relation(z_t, t),
            kl_direction=hp.kl_direction,
        )
    else:
        class_term = Tensor(0.0)
    if hp.use_swrd:
        sample_term = relation_alignment(
            sample_wise_relation(z_s, t, scale=hp.sample_scale),
            sample_wise_relation(z_t, t, scale=hp.sample_scale),
            kl_direction=hp.kl_direction,
        )
    else:
        sample_term = Tensor(0.0)
    logit_kl = _directed_kl(softmax_probs(z_s, t), softmax_probs(z_t, t), hp.kl_direction)
    scale = hp.lam * (t**2 if hp.t2_scale else 1.0)
    total = add(add(class_term, sample_term), mul(logit_kl, float(scale)))
    return DfraTerms(class_term, sample_term, logit_kl, total)


def dfra_loss(z_s, z_t, hp):
    """Scalar relation loss; see dfra_terms for the component breakdown."""
    return dfra_terms(z_s, z_t, hp).total
