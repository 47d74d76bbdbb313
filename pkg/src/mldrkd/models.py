"""Stage-structured toy networks: a spatial (CNN-style) family and a
token-based family, both emitting per-stage features for fusion.

Spatial stages merge 2x2 patches through a linear map + GELU, halving
the spatial extent each stage.  Token stages run a token-mixing and a
channel-mixing residual block over an embedded patch sequence with an
explicit class token at position 0.  Both expose the same ForwardResult
contract; architecture differences are absorbed downstream by token
extraction.

Checkpoints serialize every named parameter as raw little-endian f64
with a positioned manifest; round-trips are bit-exact.
"""

from dataclasses import dataclass, field

import numpy as np

from ._binio import ByteReader, ByteWriter
from .autodiff import (
    Tensor,
    add,
    broadcast_to,
    concat,
    gelu,
    global_avg_pool,
    linear,
    narrow,
    reshape,
    transpose,
)
from .errors import ConfigError, ContractError, DataError, FormatError
from .fusion import ARCH_KINDS, StageOutput

CHECKPOINT_MAGIC = b"MLDR"
CHECKPOINT_VERSION = 1


@dataclass
class ModelSpec:
    """Declarative shape of one toy network.

    widths: per-stage channel dims (spatial) or the shared embedding dim
    repeated per stage (token-based, all entries equal).
    input_shape: (C, H, W) of one sample, batch axis excluded.
    """

    arch_kind: str
    n_stages: int
    widths: tuple
    n_classes: int
    input_shape: tuple
    patch_size: int = 4

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if self.arch_kind not in ARCH_KINDS:
            raise ConfigError(f"arch_kind must be one of {ARCH_KINDS}, got {self.arch_kind!r}")
        if not 1 <= self.n_stages <= 4:
            raise ConfigError(f"n_stages must be 1..4, got {self.n_stages}")
        if len(self.widths) != self.n_stages:
            raise ConfigError(f"widths has {len(self.widths)} entries for {self.n_stages} stages")
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be (C, H, W), got {self.input_shape}")
        c, h, w = self.input_shape
        if self.arch_kind == "spatial":
            div = 2**self.n_stages
            if h % div or w % div:
                raise ConfigError(
                    f"spatial input {h}x{w} must be divisible by 2^{self.n_stages}"
                )
        else:
            if len(set(self.widths)) != 1:
                raise ConfigError(f"token-based widths must all match, got {self.widths}")
            if h % self.patch_size or w % self.patch_size:
                raise ConfigError(
                    f"input {h}x{w} not divisible by patch size {self.patch_size}"
                )

    @property
    def n_tokens(self):
        """Patch count, class token excluded."""
        _, h, w = self.input_shape
        return (h // self.patch_size) * (w // self.patch_size)


@dataclass
class ForwardResult:
    logits: Tensor
    stages: list = field(default_factory=list)


def _uniform(rng, shape, fan_in, gain=1.0):
    # centered uniform with std = gain / sqrt(fan_in); gain > 1 on layers
    # feeding GELU keeps activations from decaying through depth
    bound = gain * np.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


class Model:
    """Parameter container with a deterministic forward pass."""

    def __init__(self, spec):
        self.spec = spec
        self._params = {}

    def _add(self, name, tensor):
        self._params[name] = tensor
        return tensor

    def parameters(self):
        """(name, tensor) pairs in stable creation order."""
        return list(self._params.items())

    def freeze(self):
        """Drop gradient participation for every parameter (teacher mode)."""
        for p in self._params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def state_dict(self):
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state(self, state):
        """Install arrays by name; unknown, missing, or misshapen entries fail."""
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ContractError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, p in self._params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ContractError(
                    f"parameter {name!r}: checkpoint shape {arr.shape} != model shape {p.data.shape}"
                )
        for name, p in self._params.items():
            p.data = np.asarray(state[name], dtype=np.float64).copy()
            p.grad = None
        return self

    def _check_input(self, batch):
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        expected = self.spec.input_shape
        if x.data.ndim != 4 or x.data.shape[1:] != expected:
            raise DataError(
                f"input batch must be B x {expected}, got shape {x.data.shape}"
            )
        return x

    def forward(self, batch):
        raise NotImplementedError


class SpatialNet(Model):
    """Patch-merging stages over an image; GAP + linear classification head."""

    def __init__(self, spec, rng):
        super().__init__(spec)
        c_in = spec.input_shape[0]
        for i, c_out in enumerate(spec.widths):
            fan = c_in * 4
            self._add(f"stage{i}.w", _uniform(rng, (fan, c_out), fan, gain=2.0))
            self._add(f"stage{i}.b", _zeros(c_out))
            c_in = c_out
        self._add("head.w", _uniform(rng, (c_in, spec.n_classes), c_in))
        self._add("head.b", _zeros(spec.n_classes))

    def forward(self, batch):
        x = self._check_input(batch)
        p = self._params
        stages = []
        for i in range(self.spec.n_stages):
            b, c, h, w = x.data.shape
            x = reshape(x, (b, c, h // 2, 2, w // 2, 2))
            x = transpose(x, (0, 2, 4, 1, 3, 5))
            x = reshape(x, (b, h // 2, w // 2, c * 4))
            x = gelu(linear(x, p[f"stage{i}.w"], p[f"stage{i}.b"]))
            x = transpose(x, (0, 3, 1, 2))
            stages.append(StageOutput(x, i + 1, "spatial"))
        logits = linear(global_avg_pool(x), p["head.w"], p["head.b"])
        return ForwardResult(logits, stages)


class TokenNet(Model):
    """Patch embedding + class token + mixer-style stages; head reads the token."""

    def __init__(self, spec, rng):
        super().__init__(spec)
        c = spec.input_shape[0]
        d = spec.widths[0]
        seq = spec.n_tokens + 1
        patch_dim = c * spec.patch_size * spec.patch_size
        self._add("embed.w", _uniform(rng, (patch_dim, d), patch_dim))
        self._add("embed.b", _zeros(d))
        self._add("cls", _uniform(rng, (d,), d))
        self._add("pos", _uniform(rng, (seq, d), d))
        for i in range(spec.n_stages):
            self._add(f"stage{i}.tok_w", _uniform(rng, (seq, seq), seq))
            self._add(f"stage{i}.tok_b", _zeros(seq))
            self._add(f"stage{i}.ch_w", _uniform(rng, (d, d), d))
            self._add(f"stage{i}.ch_b", _zeros(d))
        self._add("head.w", _uniform(rng, (d, spec.n_classes), d))
        self._add("head.b", _zeros(spec.n_classes))

    def forward(self, batch):
        x = self._check_input(batch)
        p = self._params
        spec = self.spec
        b, c, h, w = x.data.shape
        ps = spec.patch_size
        d = spec.widths[0]
        x = reshape(x, (b, c, h // ps, ps, w // ps, ps))
        x = transpose(x, (0, 2, 4, 1, 3, 5))
        x = reshape(x, (b, spec.n_tokens, c * ps * ps))
        x = linear(x, p["embed.w"], p["embed.b"])
        cls = broadcast_to(reshape(p["cls"], (1, 1, d)), (b, 1, d))
        x = add(concat([cls, x], axis=1), p["pos"])
        stages = []
        for i in range(spec.n_stages):
            t = transpose(x, (0, 2, 1))
            t = gelu(linear(t, p[f"stage{i}.tok_w"], p[f"stage{i}.tok_b"]))
            x = add(x, transpose(t, (0, 2, 1)))
            x = add(x, gelu(linear(x, p[f"stage{i}.ch_w"], p[f"stage{i}.ch_b"])))
            stages.append(StageOutput(x, i + 1, "token-based"))
        tok = reshape(narrow(x, 1, 0, 1), (b, d))
        logits = linear(tok, p["head.w"], p["head.b"])
        return ForwardResult(logits, stages)


def build_model(spec, seed):
    rng = np.random.default_rng(seed)
    if spec.arch_kind == "spatial":
        return SpatialNet(spec, rng)
    return TokenNet(spec, rng)


def stage_shapes(spec):
    """Per-stage feature shapes (batch axis excluded), in depth order."""
    if spec.arch_kind == "spatial":
        _, h, w = spec.input_shape
        return [
            (spec.widths[i], h >> (i + 1), w >> (i + 1)) for i in range(spec.n_stages)
        ]
    return [(spec.n_tokens + 1, spec.widths[0])] * spec.n_stages


def count_params(model):
    """Exact learnable scalar count."""
    return sum(p.data.size for _, p in model.parameters())


# ------------------------------------------------------------- checkpoints


def save_checkpoint(path, named_params):
    """Write (name, array) pairs: manifest with explicit offsets, then blobs."""
    entries = [(name, np.ascontiguousarray(_data_of(p), dtype=np.float64)) for name, p in named_params]
    header_len = len(CHECKPOINT_MAGIC) + 4 + 4
    for name, arr in entries:
        header_len += 4 + len(name.encode("utf-8")) + 4 + 4 * arr.ndim + 8
    w = ByteWriter()
    w.raw(CHECKPOINT_MAGIC)
    w.u32(CHECKPOINT_VERSION)
    w.u32(len(entries))
    offset = header_len
    for name, arr in entries:
        w.utf8(name)
        w.u32(arr.ndim)
        for dim in arr.shape:
            w.u32(dim)
        w.u64(offset)
        offset += 8 * arr.size
    assert w.offset == header_len
    for _, arr in entries:
        w.f64_array(arr)
    with open(path, "wb") as f:
        f.write(w.getvalue())


def _data_of(p):
    return p.data if isinstance(p, Tensor) else np.asarray(p)


def load_checkpoint(path):
    """Read a checkpoint back as an ordered {name: array} dict."""
    with open(path, "rb") as f:
        raw = f.read()
    r = ByteReader(raw, str(path))
    r.magic(CHECKPOINT_MAGIC)
    version = r.u32("format version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version} at byte 4")
    n_entries = r.u32("entry count")
    manifest = []
    for i in range(n_entries):
        name = r.utf8(f"entry {i} name")
        rank = r.u32(f"entry {i} rank")
        if rank > 8:
            raise FormatError(f"{path}: entry {i} rank {rank} unreasonable at byte {r.offset - 4}")
        dims = tuple(int(d) for d in r.u32_array(rank, f"entry {i} dims"))
        off = r.u64(f"entry {i} offset")
        manifest.append((name, dims, off))
    state = {}
    for i, (name, dims, off) in enumerate(manifest):
        if off != r.offset:
            raise FormatError(
                f"{path}: entry {i} ({name!r}) declares offset {off} but data begins at byte {r.offset}"
            )
        count = int(np.prod(dims)) if dims else 1
        state[name] = r.f64_array(count, f"entry {i} ({name!r}) values").reshape(dims)
    r.expect_eof()
    return state


def save_model(path, model):
    save_checkpoint(path, model.parameters())


def load_model_state(model, path):
    return model.load_state(load_checkpoint(path))
