"""Timing comparison of the compiled kernels against the numpy fallback.

Two layers: raw kernel microbenchmarks (softmax and GELU, forward and
backward), and one full training epoch on a small synthetic problem run
once per backend.  Parity between backends is asserted while timing, so
the benchmark doubles as an equivalence check.
"""

import time

import numpy as np

from . import backend
from .data import SynthSpec, generate, similarity_from_pairs, stratified_split
from .models import ModelSpec
from .train import TrainConfig, train

KERNEL_SHAPES = {
    "softmax_fwd": (512, 128),
    "softmax_bwd": (512, 128),
    "gelu_fwd": (64, 32, 16, 16),
    "gelu_bwd": (64, 32, 16, 16),
}


def _time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _kernel_cases(rng):
    x_sm = rng.standard_normal(KERNEL_SHAPES["softmax_fwd"])
    y_sm = backend.softmax_last(x_sm)
    g_sm = rng.standard_normal(x_sm.shape)
    x_g = rng.standard_normal(KERNEL_SHAPES["gelu_fwd"])
    g_g = rng.standard_normal(x_g.shape)
    return [
        ("softmax_fwd", lambda: backend.softmax_last(x_sm)),
        ("softmax_bwd", lambda: backend.softmax_last_bwd(y_sm, g_sm)),
        ("gelu_fwd", lambda: backend.gelu(x_g)),
        ("gelu_bwd", lambda: backend.gelu_bwd(x_g, g_g)),
    ]


def _epoch_case():
    sim = similarity_from_pairs(6, {(0, 1): 0.8}, 0.1)
    spec = SynthSpec(6, 40, (1, 8, 8), sim, noise_sigma=0.7, seed=5, base_distance=4.0)
    train_ds, eval_ds = stratified_split(generate(spec), 0.25, 1)
    student = ModelSpec("spatial", 2, (4, 8), 6, (1, 8, 8))
    cfg = TrainConfig(
        base_lr=0.05, epochs=1, batch_size=32, seed=0, method="ce_only"
    )

    def run():
        record, _, _ = train(cfg, student, None, train_ds, eval_ds)
        return record.final_acc

    return run


def available_backends():
    names = ["py"]
    try:
        from . import _fastkernels  # noqa: F401

        names.insert(0, "ext")
    except ImportError:
        pass
    return names


def run_bench(repeats=5, out=print):
    """Benchmark each backend; prints one row per (case, backend).

    Returns {case: {backend: seconds}}.  Raises if backends disagree
    numerically (1e-12) on any kernel output.
    """
    names = available_backends()
    original = backend.BACKEND
    rng = np.random.default_rng(0)
    cases = _kernel_cases(rng) + [("train_epoch", _epoch_case())]
    results = {}
    reference = {}
    try:
        for name in names:
            backend._set_backend(name)
            for case, fn in cases:
                secs, value = _time(fn, repeats if case != "train_epoch" else max(1, repeats // 2))
                results.setdefault(case, {})[name] = secs
                if case not in reference:
                    reference[case] = value
                else:
                    diff = float(np.max(np.abs(np.asarray(value) - np.asarray(reference[case]))))
                    if diff > 1e-12:
                        raise AssertionError(
                            f"backend mismatch on {case}: {name} differs by {diff:.3e}"
                        )
    finally:
        backend._set_backend(original)

    out(f"backends: {', '.join(names)} (active: {original})")
    header = f"{'case':14s}" + "".join(f"{n:>12s}" for n in names)
    if len(names) > 1:
        header += f"{'speedup':>10s}"
    out(header)
    for case, _ in cases:
        row = f"{case:14s}"
        for n in names:
            row += f"{results[case][n] * 1e3:10.3f}ms"
        if len(names) > 1:
            row += f"{results[case]['py'] / results[case]['ext']:9.2f}x"
        out(row)
    return results
