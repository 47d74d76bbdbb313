"""Synthetic classification data with controllable inter-class structure.

Class centers are placed so that the distance between two centers is
base_distance * (1 - similarity): similar classes sit close together,
giving a well-trained teacher genuinely informative off-target
probabilities.  Placement uses a classical multidimensional-scaling
construction from the target distance matrix, falling back to scaled
orthogonal placement when the requested distances are not Euclidean-
embeddable.  Samples are centers plus isotropic Gaussian noise; the
whole pipeline is deterministic per seed.
"""

import math
from dataclasses import dataclass

import numpy as np

from ._binio import ByteReader, ByteWriter
from .autodiff import Tensor
from .errors import ConfigError, DataError, FormatError

DATASET_MAGIC = b"MLDS"
DATASET_VERSION = 1


@dataclass
class SynthSpec:
    """Recipe for one synthetic dataset.

    class_similarity: N x N symmetric matrix, unit diagonal, entries in
    [0, 1]; higher entries pull the two class centers together.
    """

    n_classes: int
    samples_per_class: int
    input_shape: tuple
    class_similarity: np.ndarray
    noise_sigma: float
    seed: int
    base_distance: float = 4.0

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        n = self.n_classes
        if n < 2:
            raise ConfigError(f"n_classes must be >= 2, got {n}")
        if self.samples_per_class < 1:
            raise ConfigError(f"samples_per_class must be >= 1, got {self.samples_per_class}")
        if not self.input_shape or any(d < 1 for d in self.input_shape):
            raise ConfigError(f"input_shape must be positive dims, got {self.input_shape}")
        sim = np.asarray(self.class_similarity, dtype=np.float64)
        if sim.shape != (n, n):
            raise ConfigError(f"class_similarity must be {n}x{n}, got {sim.shape}")
        if not np.allclose(sim, sim.T, atol=0):
            raise ConfigError("class_similarity must be symmetric")
        if not np.allclose(np.diag(sim), 1.0, atol=0):
            raise ConfigError("class_similarity must have a unit diagonal")
        if sim.min() < 0 or sim.max() > 1:
            raise ConfigError("class_similarity entries must lie in [0, 1]")
        self.class_similarity = sim
        if not self.noise_sigma > 0:
            raise ConfigError(f"noise_sigma must be positive, got {self.noise_sigma}")
        if not self.base_distance > 0:
            raise ConfigError(f"base_distance must be positive, got {self.base_distance}")

    @property
    def ambient_dim(self):
        return int(np.prod(self.input_shape))


def similarity_from_pairs(n_classes, pairs, background=0.0):
    """Build a similarity matrix from {(i, j): s} overrides on a flat background."""
    sim = np.full((n_classes, n_classes), float(background))
    np.fill_diagonal(sim, 1.0)
    for (i, j), s in pairs.items():
        if i == j:
            raise ConfigError(f"similarity pair ({i},{j}) must be off-diagonal")
        sim[i, j] = sim[j, i] = float(s)
    return sim


@dataclass
class Dataset:
    """Materialized samples: inputs[M, ...], integer labels[M], split tag."""

    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    tag: str = "all"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.inputs.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"inputs ({self.inputs.shape}) and labels ({self.labels.shape}) disagree"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(
                f"labels must lie in [0, {self.n_classes}), got "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self):
        return self.labels.shape[0]


def _smooth_basis(input_shape, k):
    """k orthonormal low-frequency cosine modes over the input grid.

    Class-center directions must be spatially smooth or pooling/weight-
    sharing models cannot generalize from them; cosine modes, ordered by
    total frequency with the constant mode excluded, give an orthonormal
    basis of exactly such directions.  Returns (ambient_dim, k).
    """

    def dct_mode(length, freq):
        x = np.arange(length)
        v = np.cos(math.pi * freq * (x + 0.5) / length)
        return v / np.linalg.norm(v)

    if len(input_shape) == 1:
        d = input_shape[0]
        if k > d - 1:
            raise ConfigError(f"need {k} smooth modes but a {d}-vector offers {d - 1}")
        return np.stack([dct_mode(d, u) for u in range(1, k + 1)], axis=1)
    c, h, w = input_shape[0], input_shape[-2], input_shape[-1]
    modes = sorted(
        ((u + v, u, v) for u in range(h) for v in range(w) if (u, v) != (0, 0))
    )
    if k > len(modes) * c:
        raise ConfigError(
            f"need {k} smooth modes but inputs {input_shape} offer {len(modes) * c}"
        )
    basis = np.zeros((int(np.prod(input_shape)), k))
    for m in range(k):
        ch = m % c
        _, u, v = modes[m // c]
        plane = np.outer(dct_mode(h, u), dct_mode(w, v))
        vol = np.zeros(input_shape)
        vol[ch] = plane
        basis[:, m] = vol.reshape(-1)
    return basis


def _mds_centers(distances, input_shape, rng):
    """Place class centers realizing an N x N distance matrix.

    Double-center the squared distances; if the Gram matrix is (close to)
    positive semidefinite its eigendecomposition reproduces the requested
    distances exactly.  Otherwise fall back to scaled orthonormal
    placement, which keeps every pair equally far apart.  Either way the
    low-dimensional layout is rotated by a seeded orthogonal matrix and
    carried into the ambient space along smooth basis directions, which
    preserves all pairwise distances.
    """
    n = distances.shape[0]
    d2 = distances**2
    j = np.eye(n) - np.full((n, n), 1.0 / n)
    gram = -0.5 * j @ d2 @ j
    evals, evecs = np.linalg.eigh(gram)
    top = evals.max(initial=0.0)
    embeddable = top > 0 and evals.min() > -1e-8 * top
    if embeddable:
        keep = evals > 1e-12 * top
        centers = evecs[:, keep] * np.sqrt(evals[keep])
    else:
        scale = distances[~np.eye(n, dtype=bool)].mean() / math.sqrt(2.0)
        centers = np.eye(n) * scale
    k = centers.shape[1]
    basis = _smooth_basis(input_shape, k)
    q, r = np.linalg.qr(rng.normal(size=(k, k)))
    q *= np.sign(np.diag(r))  # fix the QR sign ambiguity for determinism
    return centers @ q.T @ basis.T


def generate(spec):
    """Deterministically materialize the dataset described by spec."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_classes
    distances = spec.base_distance * (1.0 - spec.class_similarity)
    np.fill_diagonal(distances, 0.0)
    centers = _mds_centers(distances, spec.input_shape, rng)
    labels = np.repeat(np.arange(n, dtype=np.int64), spec.samples_per_class)
    m = labels.shape[0]
    flat = centers[labels] + spec.noise_sigma * rng.normal(size=(m, spec.ambient_dim))
    return Dataset(flat.reshape((m,) + spec.input_shape), labels, n)


def save(path, ds):
    """Write the fixed binary layout; bit-exact round-trip with load()."""
    w = ByteWriter()
    w.raw(DATASET_MAGIC)
    w.u32(DATASET_VERSION)
    w.u32(ds.n_classes)
    w.u64(len(ds))
    sample_shape = ds.inputs.shape[1:]
    w.u32(len(sample_shape))
    for d in sample_shape:
        w.u32(d)
    w.u32_array(ds.labels)
    w.f64_array(ds.inputs)
    with open(path, "wb") as f:
        f.write(w.getvalue())


def load(path):
    """Read a dataset file; any structural disagreement is a positioned error."""
    with open(path, "rb") as f:
        raw = f.read()
    r = ByteReader(raw, str(path))
    r.magic(DATASET_MAGIC)
    version = r.u32("format version")
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported format version {version} at byte 4")
    n_classes = r.u32("class count")
    m = r.u64("sample count")
    rank = r.u32("input rank")
    if rank == 0 or rank > 8:
        raise FormatError(f"{path}: input rank {rank} invalid at byte {r.offset - 4}")
    dims = tuple(int(d) for d in r.u32_array(rank, "input dims"))
    if any(d < 1 for d in dims):
        raise FormatError(f"{path}: nonpositive input dim in {dims}")
    labels_at = r.offset
    labels = r.u32_array(m, "labels").astype(np.int64)
    if len(labels) and labels.max() >= n_classes:
        bad = int(np.argmax(labels >= n_classes))
        raise FormatError(
            f"{path}: label {labels[bad]} at index {bad} (byte {labels_at + 4 * bad}) "
            f"out of range [0, {n_classes})"
        )
    inputs = r.f64_array(m * int(np.prod(dims)), "inputs").reshape((m,) + dims)
    r.expect_eof()
    return Dataset(inputs, labels, n_classes)


def batches(ds, batch_size, seed, shuffle=True):
    """One epoch of (Tensor inputs, label array) minibatches.

    Seeded permutation when shuffling; the final short batch is emitted
    as-is.
    """
    m = len(ds)
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if batch_size > m:
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {m}")
    order = np.random.default_rng(seed).permutation(m) if shuffle else np.arange(m)
    for start in range(0, m, batch_size):
        idx = order[start : start + batch_size]
        yield Tensor(ds.inputs[idx]), ds.labels[idx]


def stratified_split(ds, eval_fraction, seed):
    """Split per class into (train, eval) with deterministic membership."""
    if not 0 < eval_fraction < 1:
        raise ConfigError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
    rng = np.random.default_rng(seed)
    train_idx = []
    eval_idx = []
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_eval = int(round(eval_fraction * len(idx)))
        eval_idx.append(idx[:n_eval])
        train_idx.append(idx[n_eval:])
    train_idx = np.concatenate(train_idx)
    eval_idx = np.concatenate(eval_idx)
    train = Dataset(ds.inputs[train_idx], ds.labels[train_idx], ds.n_classes, tag="train")
    eval_ds = Dataset(ds.inputs[eval_idx], ds.labels[eval_idx], ds.n_classes, tag="eval")
    return train, eval_ds
