"""Gated multi-scale fusion of per-stage student outputs.

Each of up to four network stages contributes a class token (native for
token-based architectures, synthesized by pooling + linear for spatial
ones) and a projection of its features into logit space.  A two-layer
gating network reads the concatenated tokens and produces per-sample
convex weights over stages; the fused logit is the weighted combination
of the stage logits and is aligned against the teacher's logits with the
relation loss.  Fusion exists only at training time; evaluation uses the
final classification head alone.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    gelu,
    global_avg_pool,
    linear,
    mul,
    narrow,
    reshape,
    softmax,
    stack,
    tmean,
    tsum,
)
from .errors import ConfigError, ShapeError
from .losses import dfra_loss

ARCH_KINDS = ("spatial", "token-based")


@dataclass
class StageOutput:
    """One stage's emission: raw features, depth position, architecture kind.

    class_token is filled by extract_token during fusion; models emit
    raw features only.
    """

    features: Tensor
    stage_index: int
    arch_kind: str
    class_token: Optional[Tensor] = None


@dataclass
class StageParams:
    """Learnable pieces tied to one fused stage.

    token_w/token_b synthesize the class token for spatial stages
    (token-based stages carry a native token and leave them None);
    proj_w/proj_b map pooled features to N logits.
    """

    arch_kind: str
    proj_w: Tensor = None
    proj_b: Tensor = None
    token_w: Optional[Tensor] = None
    token_b: Optional[Tensor] = None


@dataclass
class MsdfParams:
    """Per-stage extraction/projection parameters plus the gating network."""

    stages: list
    gate_w1: Tensor
    gate_b1: Tensor
    gate_w2: Tensor
    gate_b2: Tensor
    d_tok: int

    def parameters(self):
        """(name, tensor) pairs of every learnable leaf, stable order."""
        out = []
        for i, sp in enumerate(self.stages):
            if sp.token_w is not None:
                out.append((f"stage{i}.token_w", sp.token_w))
                out.append((f"stage{i}.token_b", sp.token_b))
            out.append((f"stage{i}.proj_w", sp.proj_w))
            out.append((f"stage{i}.proj_b", sp.proj_b))
        out.extend(
            [
                ("gate.w1", self.gate_w1),
                ("gate.b1", self.gate_b1),
                ("gate.w2", self.gate_w2),
                ("gate.b2", self.gate_b2),
            ]
        )
        return out


@dataclass
class FusedLogit:
    """Fused B x N logits plus the B x S gate weights that produced them."""

    values: Tensor
    gate_weights: Tensor


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in) if fan_in > 0 else 0.0
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_msdf_params(stage_shapes, arch_kind, n_classes, d_tok, rng, h_gate=None):
    """Build MsdfParams for the given per-stage feature shapes.

    stage_shapes: one entry per fused stage, a (C, H, W) tuple for
    spatial stages or an (L, D) tuple for token-based stages (batch axis
    excluded).  The final gate layer starts at zero so fusion begins
    with uniform stage weights.
    """
    if arch_kind not in ARCH_KINDS:
        raise ConfigError(f"arch_kind must be one of {ARCH_KINDS}, got {arch_kind!r}")
    if not 1 <= len(stage_shapes) <= 4:
        raise ConfigError(f"fusion supports 1..4 stages, got {len(stage_shapes)}")
    h_gate = d_tok if h_gate is None else h_gate
    stages = []
    for shape in stage_shapes:
        if arch_kind == "spatial":
            c = shape[0]
            stages.append(
                StageParams(
                    arch_kind=arch_kind,
                    proj_w=_uniform(rng, (c, n_classes), c),
                    proj_b=Tensor(np.zeros(n_classes), requires_grad=True),
                    token_w=_uniform(rng, (c, d_tok), c),
                    token_b=Tensor(np.zeros(d_tok), requires_grad=True),
                )
            )
        else:
            d = shape[-1]
            if d != d_tok:
                raise ConfigError(f"token stage dim {d} must equal d_tok {d_tok}")
            stages.append(
                StageParams(
                    arch_kind=arch_kind,
                    proj_w=_uniform(rng, (d, n_classes), d),
                    proj_b=Tensor(np.zeros(n_classes), requires_grad=True),
                )
            )
    s = len(stage_shapes)
    return MsdfParams(
        stages=stages,
        gate_w1=_uniform(rng, (s * d_tok, h_gate), s * d_tok),
        gate_b1=Tensor(np.zeros(h_gate), requires_grad=True),
        gate_w2=Tensor(np.zeros((h_gate, s)), requires_grad=True),
        gate_b2=Tensor(np.zeros(s), requires_grad=True),
        d_tok=d_tok,
    )


def extract_token(stage_features, arch_kind, stage_params=None):
    """Split a stage into (class_token B x D_tok, remaining features).

    Token-based stages hold their class token at sequence position 0 and
    return the remaining positions as features.  Spatial stages have no
    native token; one is synthesized as linear(global-average-pool) using
    stage_params, and the full feature map is returned unchanged.
    """
    if arch_kind == "token-based":
        f = stage_features
        if f.data.ndim != 3 or f.data.shape[1] < 2:
            raise ShapeError(f"token stage needs B x L x D with L >= 2, got {f.data.shape}")
        tok = reshape(narrow(f, 1, 0, 1), (f.data.shape[0], f.data.shape[2]))
        rest = narrow(f, 1, 1, f.data.shape[1] - 1)
        return tok, rest
    if arch_kind == "spatial":
        if stage_params is None or stage_params.token_w is None:
            raise ConfigError("spatial stages need token synthesis parameters")
        pooled = global_avg_pool(stage_features)
        if pooled.data.shape[1] != stage_params.token_w.data.shape[0]:
            raise ConfigError(
                f"pooled width {pooled.data.shape[1]} does not match token projector "
                f"input {stage_params.token_w.data.shape[0]}"
            )
        return linear(pooled, stage_params.token_w, stage_params.token_b), stage_features
    raise ConfigError(f"arch_kind must be one of {ARCH_KINDS}, got {arch_kind!r}")


def project_stage(features, stage_params):
    """Pool a stage's features and map them to N logits.

    4-d features pool over the spatial axes, 3-d features average over
    token positions, 2-d features pass straight to the linear map.
    """
    nd = features.data.ndim
    if nd == 4:
        pooled = global_avg_pool(features)
    elif nd == 3:
        pooled = tmean(features, axis=1)
    elif nd == 2:
        pooled = features
    else:
        raise ShapeError(f"cannot project {nd}-d stage features {features.data.shape}")
    if pooled.data.shape[1] != stage_params.proj_w.data.shape[0]:
        raise ConfigError(
            f"pooled width {pooled.data.shape[1]} does not match projector "
            f"input {stage_params.proj_w.data.shape[0]}"
        )
    return linear(pooled, stage_params.proj_w, stage_params.proj_b)


def gate_weights(tokens, params):
    """Per-sample convex weights over stages from the concatenated tokens."""
    if not tokens:
        raise ConfigError("gate_weights needs at least one token")
    for t in tokens:
        if t.data.ndim != 2 or t.data.shape[1] != params.d_tok:
            raise ConfigError(
                f"every token must be B x {params.d_tok}, got {t.data.shape}"
            )
    x = concat(tokens, axis=1) if len(tokens) > 1 else tokens[0]
    if x.data.shape[1] != params.gate_w1.data.shape[0]:
        raise ConfigError(
            f"concatenated token width {x.data.shape[1]} does not match gate "
            f"input {params.gate_w1.data.shape[0]}"
        )
    hidden = gelu(linear(x, params.gate_w1, params.gate_b1))
    return softmax(linear(hidden, params.gate_w2, params.gate_b2), axis=-1)


def fuse(stage_logits, w_balance):
    """Per-sample convex combination of S stage logit batches."""
    stage_logits = list(stage_logits)
    s = len(stage_logits)
    if s == 0:
        raise ShapeError("fuse needs at least one stage logit batch")
    if w_balance.data.ndim != 2 or w_balance.data.shape[1] != s:
        raise ShapeError(
            f"gate weights must be B x {s}, got {w_balance.data.shape}"
        )
    shapes = {t.data.shape for t in stage_logits}
    if len(shapes) != 1:
        raise ShapeError(f"stage logits disagree in shape: {sorted(shapes)}")
    b = w_balance.data.shape[0]
    if next(iter(shapes))[0] != b:
        raise ShapeError(
            f"gate weights batch {b} does not match stage logits {next(iter(shapes))}"
        )
    stacked = stack(stage_logits, axis=1)  # B x S x N
    w = reshape(w_balance, (b, s, 1))
    fused = tsum(mul(stacked, w), axis=1)
    return FusedLogit(fused, w_balance)


def fuse_stages(stages, params):
    """Run the full fusion path over StageOutputs: extract, project, gate, fuse."""
    stages = list(stages)
    if len(stages) != len(params.stages):
        raise ConfigError(
            f"{len(stages)} stages passed but parameters cover {len(params.stages)}"
        )
    tokens = []
    logits = []
    for out, sp in zip(stages, params.stages):
        if out.arch_kind != sp.arch_kind:
            raise ConfigError(
                f"stage {out.stage_index} is {out.arch_kind} but parameters "
                f"expect {sp.arch_kind}"
            )
        tok, feats = extract_token(out.features, out.arch_kind, sp)
        out.class_token = tok
        tokens.append(tok)
        logits.append(project_stage(feats, sp))
    return fuse(logits, gate_weights(tokens, params))


def msdf_loss(stages, z_t, params, hp):
    """Relation loss between the fused stage logits and the teacher's logits."""
    return dfra_loss(fuse_stages(stages, params).values, z_t, hp)
