"""Finite-difference verification of tape gradients.

Compares analytic gradients against central differences, element by
element.  An element passes when |analytic - numeric| stays within
max(atol_floor, rtol * |numeric|).
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, backward


@dataclass
class GradMismatch:
    param: int
    index: tuple
    analytic: float
    numeric: float

    def __str__(self):
        return (
            f"param {self.param} at {self.index}: "
            f"analytic {self.analytic:.10g} vs numeric {self.numeric:.10g}"
        )


@dataclass
class GradReport:
    ok: bool
    n_elements: int
    max_abs_diff: float
    max_rel_diff: float = 0.0
    mismatches: list = field(default_factory=list)


def numeric_grad(fn, param, h=1e-5):
    """Central-difference gradient of the scalar fn() w.r.t. one tensor.

    fn must be a pure function of the current .data of the parameters;
    it is re-evaluated 2 * param.size times with in-place perturbations.
    """
    flat = param.data.reshape(-1)
    g = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn())
        flat[i] = orig - h
        down = float(fn())
        flat[i] = orig
        g[i] = (up - down) / (2.0 * h)
    return g.reshape(param.data.shape)


def gradcheck(fn, params, h=1e-5, rtol=1e-4, atol_floor=1e-7):
    """Check every element of every param; returns a GradReport.

    fn() must run one deterministic forward pass using the params and
    return a scalar loss Tensor.  Gradients are taken on a fresh tape,
    so caller-side .grad state is overwritten, not accumulated.
    """
    params = list(params)
    for p in params:
        if not p.requires_grad:
            raise ValueError("gradcheck params must have requires_grad=True")
        p.grad = None
    with Tape() as tape:
        loss = fn()
    backward(loss, tape)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    def scalar_fn():
        return fn().item()

    mismatches = []
    n_elements = 0
    max_abs_diff = 0.0
    max_rel_diff = 0.0
    for k, p in enumerate(params):
        num = numeric_grad(scalar_fn, p, h=h)
        ana = analytic[k]
        n_elements += num.size
        diff = np.abs(ana - num)
        if diff.size:
            max_abs_diff = max(max_abs_diff, float(diff.max()))
            rel = diff / np.maximum(np.abs(num), atol_floor / rtol)
            max_rel_diff = max(max_rel_diff, float(rel.max()))
        bad = diff > np.maximum(atol_floor, rtol * np.abs(num))
        for idx in np.argwhere(bad):
            idx = tuple(int(i) for i in idx)
            mismatches.append(GradMismatch(k, idx, float(ana[idx]), float(num[idx])))
    for p, g in zip(params, analytic):
        p.grad = g
    return GradReport(not mismatches, n_elements, max_abs_diff, max_rel_diff, mismatches)
