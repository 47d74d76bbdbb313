"""Named gradient-check battery covering every op and composite loss.

Shared by the CLI `gradcheck` subcommand and the test suite.  Each case
builds a small randomized problem, returns the leaf parameters plus a
closure producing a scalar, and is verified against central differences.
Sizes are kept tiny: the numeric pass re-runs the forward twice per
element.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fusion import StageOutput, init_msdf_params, msdf_loss
from .gradcheck import gradcheck
from .losses import (
    DistillHyperparams,
    class_wise_relation,
    cross_entropy,
    dfra_loss,
    kl_divergence,
    relation_alignment,
    sample_wise_relation,
    softmax_probs,
    vanilla_kd_loss,
)
from .models import ModelSpec, build_model

_CASES = []


def _case(name):
    def wrap(builder):
        _CASES.append((name, builder))
        return builder

    return wrap


def case_names():
    return [name for name, _ in _CASES]


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


@_case("add_broadcast")
def _(rng):
    a = _leaf(rng, 3, 4)
    b = _leaf(rng, 4)
    return [a, b], lambda: ((a + b) * (a - b)).sum()


@_case("mul_div")
def _(rng):
    a = _leaf(rng, 2, 3)
    b = Tensor(rng.standard_normal((2, 3)) + 3.0, requires_grad=True)
    return [a, b], lambda: (a * b + a / b).sum()


@_case("exp_log_neg")
def _(rng):
    a = _leaf(rng, 5, scale=0.5)
    return [a], lambda: (ad.texp(a) + ad.tlog(ad.texp(a) + 1.0) - (-a)).sum()


@_case("gelu")
def _(rng):
    a = _leaf(rng, 4, 3, scale=2.0)
    return [a], lambda: (ad.gelu(a) * ad.gelu(-a)).sum()


@_case("matmul_2d")
def _(rng):
    a = _leaf(rng, 3, 4)
    b = _leaf(rng, 4, 2)
    return [a, b], lambda: ad.matmul(a, b).sum()


@_case("matmul_batched")
def _(rng):
    a = _leaf(rng, 2, 3, 4)
    b = _leaf(rng, 2, 4, 3)
    return [a, b], lambda: (ad.matmul(a, b) * ad.matmul(a, b)).sum()


@_case("linear")
def _(rng):
    x = _leaf(rng, 3, 5)
    w = _leaf(rng, 5, 4, scale=0.5)
    b = _leaf(rng, 4)
    return [x, w, b], lambda: ad.linear(x, w, b).mean()


@_case("softmax_last")
def _(rng):
    z = _leaf(rng, 3, 6)
    t = Tensor(np.eye(6)[[0, 2, 4]])
    return [z], lambda: (ad.softmax(z) * t).sum()


@_case("softmax_mid_axis")
def _(rng):
    z = _leaf(rng, 2, 4, 3)
    w = Tensor(rng.standard_normal((2, 4, 3)))
    return [z], lambda: (ad.softmax(z, axis=1) * w).sum()


@_case("reshape_transpose")
def _(rng):
    a = _leaf(rng, 2, 3, 4)
    w = Tensor(rng.standard_normal((4, 3, 2)))
    return [a], lambda: (ad.transpose(ad.reshape(a, (2, 3, 4)), (2, 1, 0)) * w).sum()


@_case("broadcast_to")
def _(rng):
    a = _leaf(rng, 1, 4)
    w = Tensor(rng.standard_normal((3, 4)))
    return [a], lambda: (ad.broadcast_to(a, (3, 4)) * w).sum()


@_case("stack_concat_narrow")
def _(rng):
    a = _leaf(rng, 2, 3)
    b = _leaf(rng, 2, 3)
    w = Tensor(rng.standard_normal((2, 2, 3)))

    def fn():
        s = ad.stack([a, b], axis=0)
        c = ad.concat([s, s], axis=2)
        return (ad.narrow(c, 2, 1, 3) * w).sum()

    return [a, b], fn


@_case("sum_mean_axes")
def _(rng):
    a = _leaf(rng, 2, 3, 4)
    w = Tensor(rng.standard_normal((3,)))
    return [a], lambda: (ad.tmean(a, axis=(0, 2)) * w).sum() + ad.tsum(a, axis=1).mean()


@_case("global_avg_pool")
def _(rng):
    x = _leaf(rng, 2, 3, 4, 4)
    w = Tensor(rng.standard_normal((2, 3)))
    return [x], lambda: (ad.global_avg_pool(x) * w).sum()


@_case("softmax_probs_temp")
def _(rng):
    z = _leaf(rng, 3, 5)
    w = Tensor(rng.standard_normal((3, 5)))
    return [z], lambda: (softmax_probs(z, 4.0) * w).sum()


@_case("cross_entropy")
def _(rng):
    z = _leaf(rng, 4, 5)
    labels = np.array([0, 3, 1, 4])
    return [z], lambda: cross_entropy(z, labels)


@_case("kl_divergence")
def _(rng):
    a = _leaf(rng, 3, 4)
    b = _leaf(rng, 3, 4)
    return [a, b], lambda: kl_divergence(softmax_probs(a, 2.0), softmax_probs(b, 2.0))


@_case("vanilla_kd")
def _(rng):
    # teacher logits are detached inside the loss, so only the student
    # side carries gradient
    z_s = _leaf(rng, 4, 5)
    z_t = Tensor(rng.standard_normal((4, 5)))
    labels = np.array([1, 0, 2, 4])
    return [z_s], lambda: vanilla_kd_loss(z_s, z_t, labels, 4.0, 0.9)


@_case("class_relation_alignment")
def _(rng):
    z_s = _leaf(rng, 3, 4)
    z_t = _leaf(rng, 3, 4)

    def fn():
        r_s = class_wise_relation(z_s, 4.0)
        r_t = class_wise_relation(z_t, 4.0)
        return relation_alignment(r_s, r_t, kl_direction="student_first")

    return [z_s, z_t], fn


@_case("sample_relation_alignment")
def _(rng):
    z_s = _leaf(rng, 3, 4)
    z_t = _leaf(rng, 3, 4)

    def fn():
        r_s = sample_wise_relation(z_s, 4.0, scale="batch")
        r_t = sample_wise_relation(z_t, 4.0, scale="batch")
        return relation_alignment(r_s, r_t, kl_direction="teacher_first")

    return [z_s, z_t], fn


@_case("dfra_loss")
def _(rng):
    z_s = _leaf(rng, 4, 5)
    z_t = Tensor(rng.standard_normal((4, 5)))
    hp = DistillHyperparams(temperature=3.0, lam=0.7)
    return [z_s], lambda: dfra_loss(z_s, z_t, hp)


@_case("msdf_spatial")
def _(rng):
    shapes = [(2, 4, 4), (3, 2, 2)]
    params = init_msdf_params(shapes, "spatial", 4, d_tok=3, rng=rng)
    feats = [
        Tensor(rng.standard_normal((2,) + s), requires_grad=True) for s in shapes
    ]
    stages = [StageOutput(f, i, "spatial") for i, f in enumerate(feats)]
    z_t = Tensor(rng.standard_normal((2, 4)))
    hp = DistillHyperparams(temperature=2.0)
    leaves = [t for _, t in params.parameters()] + feats
    return leaves, lambda: msdf_loss(stages, z_t, params, hp)


@_case("msdf_token")
def _(rng):
    shapes = [(5, 3), (5, 3)]
    params = init_msdf_params(shapes, "token-based", 4, d_tok=3, rng=rng)
    feats = [
        Tensor(rng.standard_normal((2,) + s), requires_grad=True) for s in shapes
    ]
    stages = [StageOutput(f, i, "token-based") for i, f in enumerate(feats)]
    z_t = Tensor(rng.standard_normal((2, 4)))
    hp = DistillHyperparams(temperature=2.0)
    leaves = [t for _, t in params.parameters()] + feats
    return leaves, lambda: msdf_loss(stages, z_t, params, hp)


@_case("spatial_model_ce")
def _(rng):
    spec = ModelSpec("spatial", 2, (2, 3), 4, (1, 8, 8))
    model = build_model(spec, seed=11)
    x = rng.standard_normal((2, 1, 8, 8))
    labels = np.array([0, 3])
    params = [t for _, t in model.parameters()]
    return params, lambda: cross_entropy(model.forward(x).logits, labels)


@_case("token_model_ce")
def _(rng):
    spec = ModelSpec("token-based", 2, (6, 6), 4, (1, 8, 8), patch_size=4)
    model = build_model(spec, seed=12)
    x = rng.standard_normal((2, 1, 8, 8))
    labels = np.array([2, 1])
    params = [t for _, t in model.parameters()]
    return params, lambda: cross_entropy(model.forward(x).logits, labels)


def run_checks(seed=0, names=None, h=1e-5, rtol=1e-4, atol_floor=1e-7):
    """Run the battery; returns [(name, GradReport)].

    names filters to a subset; unknown names raise KeyError.
    """
    known = dict(_CASES)
    if names is None:
        selected = list(_CASES)
    else:
        selected = [(n, known[n]) for n in names]
    out = []
    for name, builder in selected:
        rng = np.random.default_rng(seed)
        params, fn = builder(rng)
        out.append((name, gradcheck(fn, params, h=h, rtol=rtol, atol_floor=atol_floor)))
    return out
