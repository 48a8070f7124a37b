"""Datasets, Dirichlet label partitioning and deterministic minibatches."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Batch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SYNTH_MAGIC = b"GMLB"
SYNTH_VERSION = 1


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {X.shape}")
        if X.shape[0] < 1 or X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} feature rows vs {y.shape[0]} labels")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> Batch:
        idx = np.asarray(idx)
        return Batch(self.features[idx], self.labels[idx])


@dataclass(frozen=True)
class Partition:
    shards: tuple[np.ndarray, ...]
    omega: float

    def __len__(self):
        return len(self.shards)

    def sizes(self) -> np.ndarray:
        return np.array([s.size for s in self.shards])


# -- MNIST IDX ---------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, magic: int, ndims: int, name: str):
    header = 4 + 4 * ndims
    if len(raw) < header:
        raise IdxTruncatedError(f"{name}: file shorter than its {header}-byte header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxMagicError(f"{name}: magic 0x{got:08x}, expected 0x{magic:08x}")
    shape = struct.unpack(">" + "I" * ndims, raw[4:header])
    expected = int(np.prod(shape))
    if len(raw) - header < expected:
        raise IdxTruncatedError(f"{name}: {len(raw) - header} payload bytes, header promises {expected}")
    data = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header)
    return data.reshape(shape)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, str(images_path))
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images in {images_path} but {labels.shape[0]} labels in {labels_path}"
        )
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(X, labels.astype(np.int64), num_classes=10)


def load_mnist(root, split: str = "train") -> Dataset:
    """Load ``train`` or ``test`` from the standard IDX filenames under ``root``."""
    prefix = {"train": "train", "test": "t10k"}[split]
    root = Path(root)
    for suffix in ("", ".gz"):
        img = root / f"{prefix}-images-idx3-ubyte{suffix}"
        lab = root / f"{prefix}-labels-idx1-ubyte{suffix}"
        if img.exists() and lab.exists():
            return load_mnist_idx(img, lab)
    raise FileNotFoundError(f"no MNIST {split} IDX files under {root}")


# -- synthetic Gaussian mixture ------------------------------------------------

def gen_synthetic(num_classes: int, dim: int, n_per_class: int, seed: int) -> Dataset:
    """Class k samples from N(mu_k, 0.5 I), with mu_k ~ U[-2, 2]^dim."""
    if min(num_classes, dim, n_per_class) < 1:
        raise ValueError("num_classes, dim and n_per_class must all be >= 1")
    rng = np.random.default_rng(seed)
    means = rng.uniform(-2.0, 2.0, size=(num_classes, dim))
    labels = np.repeat(np.arange(num_classes), n_per_class)
    X = means[labels] + np.sqrt(0.5) * rng.standard_normal((labels.size, dim))
    return Dataset(X, labels, num_classes)


def save_synthetic(ds: Dataset, path) -> None:
    """Little-endian dump: 16-byte header (magic, version, n, dim), then
    num_classes (u32), features (f64, row-major), labels (u32)."""
    n, dim = ds.features.shape
    with open(path, "wb") as f:
        f.write(SYNTH_MAGIC + struct.pack("<III", SYNTH_VERSION, n, dim))
        f.write(struct.pack("<I", ds.num_classes))
        f.write(ds.features.astype("<f8").tobytes())
        f.write(ds.labels.astype("<u4").tobytes())


def load_synthetic(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != SYNTH_MAGIC:
        raise ValueError(f"{path}: not a GMLB file")
    version, n, dim = struct.unpack("<III", raw[4:16])
    if version != SYNTH_VERSION:
        raise ValueError(f"{path}: unsupported GMLB version {version}")
    (num_classes,) = struct.unpack("<I", raw[16:20])
    need = 20 + 8 * n * dim + 4 * n
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(raw)}")
    X = np.frombuffer(raw, dtype="<f8", count=n * dim, offset=20).reshape(n, dim)
    y = np.frombuffer(raw, dtype="<u4", count=n, offset=20 + 8 * n * dim)
    return Dataset(X.astype(np.float64), y.astype(np.int64), num_classes)


# -- partitioning --------------------------------------------------------------

def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer counts proportional to ``weights`` summing exactly to ``total``.

    Leftover units go to the largest fractional parts, ties to the lower index.
    """
    weights = np.asarray(weights, dtype=np.float64)
    raw = weights / weights.sum() * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(dataset: Dataset, N: int, omega: float, seed: int) -> Partition:
    """Per-class Dirichlet(omega) allocation of sample indices to N workers."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if omega <= 0:
        raise ValueError("omega must be > 0")
    rng = np.random.default_rng(seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(N)]
    for k in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == k)
        if idx.size == 0:
            continue
        rng.shuffle(idx)
        q = rng.dirichlet(np.full(N, omega))
        if not np.all(np.isfinite(q)) or q.sum() <= 0:
            # every component underflowed; the mass belongs to one worker
            q = np.zeros(N)
            q[rng.integers(N)] = 1.0
        counts = largest_remainder(q, idx.size)
        for w, part in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            if part.size:
                buckets[w].append(part)
    shards = tuple(np.sort(np.concatenate(b)) if b else np.zeros(0, dtype=np.int64) for b in buckets)
    return Partition(shards=shards, omega=float(omega))


def label_entropy(labels: np.ndarray, num_classes: int) -> float:
    """Shannon entropy (nats) of a label histogram; 0 for an empty shard."""
    if labels.size == 0:
        return 0.0
    p = np.bincount(labels, minlength=num_classes) / labels.size
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


# -- minibatches ----------------------------------------------------------------

def batch_indices(shard_size: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Positions within the shard used at ``step``.

    The shard is reshuffled every epoch by a generator keyed on
    ``(seed, epoch)``; the last batch of an epoch may be short.
    """
    if shard_size < 1:
        raise ValueError("cannot draw a batch from an empty shard")
    per_epoch = -(-shard_size // batch_size)
    epoch, j = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(shard_size)
    return perm[j * batch_size:(j + 1) * batch_size]


def batch_iter(dataset: Dataset, shard: np.ndarray, batch_size: int, seed: int, step: int) -> Batch:
    shard = np.asarray(shard)
    return dataset.subset(shard[batch_indices(shard.size, batch_size, seed, step)])
