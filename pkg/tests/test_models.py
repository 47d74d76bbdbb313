import numpy as np
import pytest

from mldrkd.autodiff import Tape, Tensor, backward
from mldrkd.errors import ConfigError, ContractError, DataError, FormatError
from mldrkd.losses import cross_entropy
from mldrkd.models import (
    ModelSpec,
    build_model,
    count_params,
    load_checkpoint,
    load_model_state,
    save_checkpoint,
    save_model,
    stage_shapes,
)

SPATIAL = ModelSpec("spatial", 4, (6, 12, 18, 24), 10, (1, 16, 16))
TOKEN = ModelSpec("token-based", 4, (64,) * 4, 10, (1, 16, 16), patch_size=4)


def test_spec_validation():
    with pytest.raises(ConfigError):
        ModelSpec("dense", 1, (4,), 10, (1, 16, 16))
    with pytest.raises(ConfigError):
        ModelSpec("spatial", 5, (4,) * 5, 10, (1, 16, 16))
    with pytest.raises(ConfigError):
        ModelSpec("spatial", 2, (4,), 10, (1, 16, 16))
    with pytest.raises(ConfigError):
        ModelSpec("spatial", 1, (0,), 10, (1, 16, 16))
    with pytest.raises(ConfigError):
        ModelSpec("spatial", 1, (4,), 1, (1, 16, 16))
    with pytest.raises(ConfigError):
        ModelSpec("token-based", 2, (8, 16), 10, (1, 16, 16))
    with pytest.raises(ConfigError):
        # 16x16 does not survive 5 halvings; 4 stages need divisibility
        ModelSpec("spatial", 4, (2, 2, 2, 2), 10, (1, 8, 8))
    with pytest.raises(ConfigError):
        ModelSpec("token-based", 1, (8,), 10, (1, 15, 15), patch_size=4)


def test_forward_shapes_spatial():
    model = build_model(SPATIAL, seed=0)
    x = np.zeros((3, 1, 16, 16))
    out = model.forward(x)
    assert out.logits.data.shape == (3, 10)
    assert len(out.stages) == 4
    for st, shape in zip(out.stages, stage_shapes(SPATIAL)):
        assert st.features.data.shape == (3,) + shape
        assert st.arch_kind == "spatial"
    assert [st.stage_index for st in out.stages] == [1, 2, 3, 4]


def test_forward_shapes_token():
    model = build_model(TOKEN, seed=0)
    x = np.zeros((2, 1, 16, 16))
    out = model.forward(x)
    assert out.logits.data.shape == (2, 10)
    assert len(out.stages) == 4
    for st, shape in zip(out.stages, stage_shapes(TOKEN)):
        assert st.features.data.shape == (2,) + shape
        assert st.arch_kind == "token-based"
    # 16 patches plus the class token
    assert out.stages[0].features.data.shape[1] == 17


def test_build_is_seed_deterministic():
    a = build_model(SPATIAL, seed=5)
    b = build_model(SPATIAL, seed=5)
    c = build_model(SPATIAL, seed=6)
    for (na, pa), (nb, pb) in zip(a.parameters(), b.parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)
    assert any(
        not np.array_equal(pa.data, pc.data)
        for (_, pa), (_, pc) in zip(a.parameters(), c.parameters())
    )


def test_forward_is_deterministic():
    rng = np.random.default_rng(0)
    model = build_model(TOKEN, seed=1)
    x = rng.standard_normal((2, 1, 16, 16))
    np.testing.assert_array_equal(model.forward(x).logits.data, model.forward(x).logits.data)


def test_teacher_student_capacity_ratio():
    t = count_params(build_model(TOKEN, seed=0))
    s = count_params(build_model(SPATIAL, seed=0))
    assert t >= 4 * s


def test_input_validation():
    model = build_model(SPATIAL, seed=0)
    with pytest.raises(DataError):
        model.forward(np.zeros((2, 1, 8, 8)))
    with pytest.raises(DataError):
        model.forward(np.zeros((1, 16, 16)))


def test_freeze_drops_grads():
    model = build_model(SPATIAL, seed=0)
    model.freeze()
    x = np.random.default_rng(0).standard_normal((2, 1, 16, 16))
    with Tape() as tape:
        out = model.forward(x)
    assert len(tape) == 0
    assert all(not p.requires_grad for _, p in model.parameters())
    assert out.logits.data.shape == (2, 10)


def test_gradients_reach_every_parameter():
    model = build_model(SPATIAL, seed=3)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 1, 16, 16))
    labels = rng.integers(0, 10, size=4)
    with Tape() as tape:
        loss = cross_entropy(model.forward(x).logits, labels)
    backward(loss, tape)
    for name, p in model.parameters():
        assert p.grad is not None, name
        assert np.abs(p.grad).max() > 0, name


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = build_model(TOKEN, seed=2)
    path = tmp_path / "m.ckpt"
    save_model(path, model)
    clone = build_model(TOKEN, seed=9)
    load_model_state(clone, path)
    for (na, pa), (nb, pb) in zip(model.parameters(), clone.parameters()):
        assert na == nb
        assert pa.data.tobytes() == pb.data.tobytes()
    # saving the loaded state reproduces the file byte for byte
    path2 = tmp_path / "m2.ckpt"
    save_model(path2, clone)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(path, build_model(SPATIAL, seed=0))
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError) as e:
        load_checkpoint(path)
    assert "byte 0" in str(e.value)


def test_checkpoint_rejects_truncation(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(path, build_model(SPATIAL, seed=0))
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 9])
    with pytest.raises(FormatError) as e:
        load_checkpoint(path)
    assert "byte" in str(e.value)


def test_checkpoint_rejects_trailing_garbage(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(path, build_model(SPATIAL, seed=0))
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_rejects_bad_version(tmp_path):
    path = tmp_path / "m.ckpt"
    save_model(path, build_model(SPATIAL, seed=0))
    raw = bytearray(path.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError) as e:
        load_checkpoint(path)
    assert "version" in str(e.value)


def test_load_state_validates_names_and_shapes(tmp_path):
    model = build_model(SPATIAL, seed=0)
    state = model.state_dict()
    other = dict(state)
    other.pop(next(iter(other)))
    with pytest.raises(ContractError):
        model.load_state(other)
    bad = dict(state)
    k = next(iter(bad))
    bad[k] = np.zeros((1, 1))
    with pytest.raises(ContractError):
        model.load_state(bad)


def test_checkpoint_names_preserved(tmp_path):
    model = build_model(SPATIAL, seed=0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model.parameters())
    loaded = load_checkpoint(path)
    assert list(loaded) == [n for n, _ in model.parameters()]


def test_stage_shapes_match_forward():
    for spec in (SPATIAL, TOKEN, ModelSpec("spatial", 2, (4, 8), 6, (2, 8, 8))):
        model = build_model(spec, seed=0)
        out = model.forward(np.zeros((1,) + spec.input_shape))
        assert [st.features.data.shape[1:] for st in out.stages] == [
            tuple(s) for s in stage_shapes(spec)
        ]
