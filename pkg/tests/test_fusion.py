import math

import numpy as np
import pytest

from mldrkd.autodiff import Tensor
from mldrkd.errors import ConfigError, ShapeError
from mldrkd.fusion import (
    FusedLogit,
    MsdfParams,
    StageOutput,
    StageParams,
    extract_token,
    fuse,
    fuse_stages,
    gate_weights,
    init_msdf_params,
    msdf_loss,
    project_stage,
)
from mldrkd.losses import DistillHyperparams, dfra_loss

from oracles import oracle_fuse, oracle_gate, oracle_gelu


def spatial_setup(rng, b=3, n=5, shapes=((2, 4, 4), (3, 2, 2))):
    params = init_msdf_params(shapes, "spatial", n, d_tok=4, rng=rng)
    stages = [
        StageOutput(Tensor(rng.standard_normal((b,) + s)), i, "spatial")
        for i, s in enumerate(shapes)
    ]
    return params, stages


def test_gate_weights_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        s = int(rng.integers(1, 5))
        b = int(rng.integers(1, 5))
        d = int(rng.integers(2, 5))
        params = init_msdf_params([(d, 2, 2)] * s, "spatial", 4, d_tok=d, rng=rng)
        # zero-initialized final layer would hide mistakes; randomize it
        params.gate_w2.data[:] = rng.standard_normal(params.gate_w2.data.shape)
        params.gate_b2.data[:] = rng.standard_normal(params.gate_b2.data.shape)
        tokens = [Tensor(rng.standard_normal((b, d))) for _ in range(s)]
        got = gate_weights(tokens, params).data
        np.testing.assert_allclose(got, oracle_gate(tokens, params), rtol=0, atol=1e-9)


def test_fuse_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        s = int(rng.integers(1, 5))
        b = int(rng.integers(1, 5))
        n = int(rng.integers(2, 6))
        logits = [Tensor(rng.standard_normal((b, n))) for _ in range(s)]
        w = rng.uniform(0.1, 1.0, size=(b, s))
        w = Tensor(w / w.sum(axis=1, keepdims=True))
        got = fuse(logits, w)
        assert isinstance(got, FusedLogit)
        np.testing.assert_allclose(got.values.data, oracle_fuse(logits, w), rtol=0, atol=1e-9)


def test_gate_starts_uniform():
    rng = np.random.default_rng(2)
    params, stages = spatial_setup(rng)
    fused = fuse_stages(stages, params)
    np.testing.assert_allclose(fused.gate_weights.data, 0.5, rtol=0, atol=0)


def test_gate_rows_are_convex_weights():
    rng = np.random.default_rng(3)
    for _ in range(20):
        s = int(rng.integers(1, 5))
        d = 3
        params = init_msdf_params([(d, 2, 2)] * s, "spatial", 4, d_tok=d, rng=rng)
        params.gate_w2.data[:] = rng.standard_normal(params.gate_w2.data.shape)
        tokens = [Tensor(rng.standard_normal((4, d))) for _ in range(s)]
        w = gate_weights(tokens, params).data
        assert (w > 0).all()
        np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_fused_logits_stay_in_convex_hull():
    rng = np.random.default_rng(4)
    for _ in range(20):
        s, b, n = 3, 4, 5
        logits = [Tensor(rng.standard_normal((b, n))) for _ in range(s)]
        w = rng.uniform(0.0, 1.0, size=(b, s))
        w = Tensor(w / w.sum(axis=1, keepdims=True))
        fused = fuse(logits, w).values.data
        lo = np.min([z.data for z in logits], axis=0)
        hi = np.max([z.data for z in logits], axis=0)
        assert (fused >= lo - 1e-12).all()
        assert (fused <= hi + 1e-12).all()


def test_extract_token_token_arch_slices_position_zero():
    rng = np.random.default_rng(5)
    f = rng.standard_normal((2, 5, 3))
    tok, rest = extract_token(Tensor(f), "token-based")
    np.testing.assert_allclose(tok.data, f[:, 0, :])
    np.testing.assert_allclose(rest.data, f[:, 1:, :])


def test_extract_token_spatial_synthesizes():
    rng = np.random.default_rng(6)
    params = init_msdf_params([(3, 4, 4)], "spatial", 5, d_tok=2, rng=rng)
    f = rng.standard_normal((2, 3, 4, 4))
    tok, rest = extract_token(Tensor(f), "spatial", params.stages[0])
    pooled = f.mean(axis=(2, 3))
    want = pooled @ params.stages[0].token_w.data + params.stages[0].token_b.data
    np.testing.assert_allclose(tok.data, want, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(rest.data, f)


def test_extract_token_requires_params_for_spatial():
    with pytest.raises(ConfigError):
        extract_token(Tensor(np.zeros((1, 2, 2, 2))), "spatial")


def test_extract_token_needs_two_positions():
    with pytest.raises(ShapeError):
        extract_token(Tensor(np.zeros((2, 1, 3))), "token-based")


def test_project_stage_ndim_dispatch():
    rng = np.random.default_rng(7)
    sp = StageParams(
        "spatial",
        proj_w=Tensor(rng.standard_normal((3, 4))),
        proj_b=Tensor(rng.standard_normal(4)),
    )
    f4 = rng.standard_normal((2, 3, 2, 2))
    f3 = rng.standard_normal((2, 5, 3))
    f2 = rng.standard_normal((2, 3))
    np.testing.assert_allclose(
        project_stage(Tensor(f4), sp).data,
        f4.mean(axis=(2, 3)) @ sp.proj_w.data + sp.proj_b.data,
        rtol=1e-12,
    )
    np.testing.assert_allclose(
        project_stage(Tensor(f3), sp).data,
        f3.mean(axis=1) @ sp.proj_w.data + sp.proj_b.data,
        rtol=1e-12,
    )
    np.testing.assert_allclose(
        project_stage(Tensor(f2), sp).data, f2 @ sp.proj_w.data + sp.proj_b.data,
        rtol=1e-12,
    )
    with pytest.raises(ShapeError):
        project_stage(Tensor(np.zeros(3)), sp)


def test_msdf_loss_equals_dfra_of_fused():
    rng = np.random.default_rng(8)
    params, stages = spatial_setup(rng)
    z_t = Tensor(rng.standard_normal((3, 5)))
    hp = DistillHyperparams(temperature=2.0)
    fused = fuse_stages(stages, params)
    want = dfra_loss(fused.values, z_t, hp).item()
    got = msdf_loss(stages, z_t, params, hp).item()
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_fuse_stages_fills_class_tokens():
    rng = np.random.default_rng(9)
    params, stages = spatial_setup(rng)
    assert all(s.class_token is None for s in stages)
    fuse_stages(stages, params)
    assert all(s.class_token is not None for s in stages)
    assert all(s.class_token.data.shape == (3, 4) for s in stages)


def test_init_validates():
    rng = np.random.default_rng(10)
    with pytest.raises(ConfigError):
        init_msdf_params([(2, 2, 2)], "conv", 4, d_tok=2, rng=rng)
    with pytest.raises(ConfigError):
        init_msdf_params([(2, 2, 2)] * 5, "spatial", 4, d_tok=2, rng=rng)
    with pytest.raises(ConfigError):
        init_msdf_params([(5, 3)], "token-based", 4, d_tok=2, rng=rng)


def test_fuse_validation():
    rng = np.random.default_rng(11)
    logits = [Tensor(rng.standard_normal((2, 4)))]
    with pytest.raises(ShapeError):
        fuse([], Tensor(np.ones((2, 1))))
    with pytest.raises(ShapeError):
        fuse(logits, Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        fuse(
            [Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 5)))],
            Tensor(np.full((2, 2), 0.5)),
        )


def test_arch_mismatch_rejected():
    rng = np.random.default_rng(12)
    params, stages = spatial_setup(rng)
    stages[0].arch_kind = "token-based"
    with pytest.raises(ConfigError):
        fuse_stages(stages, params)


def test_parameters_listing_stable():
    rng = np.random.default_rng(13)
    params, _ = spatial_setup(rng)
    names = [n for n, _ in params.parameters()]
    assert names == [
        "stage0.token_w",
        "stage0.token_b",
        "stage0.proj_w",
        "stage0.proj_b",
        "stage1.token_w",
        "stage1.token_b",
        "stage1.proj_w",
        "stage1.proj_b",
        "gate.w1",
        "gate.b1",
        "gate.w2",
        "gate.b2",
    ]
