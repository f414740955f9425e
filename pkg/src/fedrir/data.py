"""Datasets, IDX loading and non-IID client partitioning."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import round_half_up

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Blob spread at which a held-out logistic-regression probe scores about 0.85
# on the default 6-class, 200-per-class, 64-dim dataset (see tests/test_data.py).
CALIBRATED_SPREAD = 0.42


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    source: str = "synthetic"

    def __post_init__(self):
        if len(self.samples) != len(self.labels):
            raise DataError(f"{len(self.samples)} samples but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "pathological"
    num_clients: int = 20
    classes_per_client: int = 2
    alpha: float = 0.1
    train_fraction: float = 0.75
    min_samples: int | None = None
    max_retries: int = 1000

    def __post_init__(self):
        if self.kind not in ("pathological", "dirichlet"):
            raise ValueError(f"unknown partition kind {self.kind!r}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.kind == "dirichlet" and not (0 < self.alpha < float("inf")):
            raise ValueError(f"alpha must be finite and positive, got {self.alpha}")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")


@dataclass
class ClientDataset:
    client_id: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    histogram: np.ndarray

    @property
    def size(self) -> int:
        return len(self.train_idx) + len(self.test_idx)

    @property
    def indices(self) -> np.ndarray:
        return np.concatenate([self.train_idx, self.test_idx])


# ---------------------------------------------------------------------------
# sources


def synth_dataset(
    num_classes: int = 6,
    per_class: int = 200,
    dim: int = 64,
    spread: float = CALIBRATED_SPREAD,
    rng: np.random.Generator | None = None,
) -> Dataset:
    """Class-conditional Gaussian blobs clipped to [0, 1]."""
    if num_classes < 2 or per_class < 2:
        raise DataError("need at least 2 classes and 2 samples per class")
    if not spread > 0:
        raise DataError(f"blob spread must be positive, got {spread}")
    rng = rng if rng is not None else np.random.default_rng(0)
    means = rng.uniform(0.25, 0.75, size=(num_classes, dim))
    labels = np.repeat(np.arange(num_classes), per_class)
    samples = means[labels] + spread * rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    return Dataset(np.clip(samples[order], 0.0, 1.0), labels[order], num_classes, "synthetic")


def _read_idx(path: Path, magic: int, what: str) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{what} file {path}: truncated header at offset 0")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataError(f"{what} file {path}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{what} file {path}: truncated dimension header at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < need:
        raise DataError(
            f"{what} file {path}: truncated payload at offset {len(raw)}, expected {header + need} bytes"
        )
    return dims, raw[header : header + need]


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair (MNIST layout), pixels scaled to [0, 1]."""
    img_dims, img_raw = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    lbl_dims, lbl_raw = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if img_dims[0] != lbl_dims[0]:
        raise DataError(f"count mismatch: {img_dims[0]} images vs {lbl_dims[0]} labels")
    n = img_dims[0]
    samples = np.frombuffer(img_raw, dtype=np.uint8).reshape(n, -1).astype(np.float64) / 255.0
    labels = np.frombuffer(lbl_raw, dtype=np.uint8).astype(np.int64)
    num_classes = int(labels.max()) + 1 if n else 0
    return Dataset(samples, labels, num_classes, f"idx:{images_path}")


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels (n,) in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        fh.write(struct.pack(">III", *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


# ---------------------------------------------------------------------------
# partitioning


def largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer counts summing exactly to ``total``; ties go to the lowest index."""
    proportions = np.asarray(proportions, dtype=np.float64)
    proportions = proportions / proportions.sum()
    exact = proportions * total
    counts = np.floor(exact).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort on descending remainder keeps lower ids first among ties
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _client_datasets(ds: Dataset, assignment: list[np.ndarray], fraction: float, rng) -> list[ClientDataset]:
    return [split_train_test(ds, i, np.sort(idx), fraction, rng) for i, idx in enumerate(assignment)]


def partition_pathological(ds: Dataset, spec: PartitionSpec, rng: np.random.Generator) -> list[ClientDataset]:
    """Each client receives shards of exactly ``classes_per_client`` classes."""
    n, c, k = spec.num_clients, ds.num_classes, spec.classes_per_client
    if k > c:
        raise ValueError(f"classes_per_client={k} exceeds class count {c}")
    if k * n < c:
        raise ValueError(f"{n} clients x {k} classes cannot cover {c} classes")
    # slot j of client i takes class order[(i * k + j) mod C]: k distinct classes per client
    order = rng.permutation(c)
    owners: dict[int, list[int]] = {cls: [] for cls in range(c)}
    for i in range(n):
        for j in range(k):
            owners[int(order[(i * k + j) % c])].append(i)
    assignment: list[list[np.ndarray]] = [[] for _ in range(n)]
    for cls in range(c):
        idx = rng.permutation(np.flatnonzero(ds.labels == cls))
        holders = owners[cls]
        counts = largest_remainder(len(idx), np.ones(len(holders)))
        if len(holders) > len(idx) or counts.min() == 0:
            raise ValueError(f"class {cls} has {len(idx)} samples for {len(holders)} shards")
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for h, lo, hi in zip(holders, bounds[:-1], bounds[1:]):
            assignment[h].append(idx[lo:hi])
    return _client_datasets(ds, [np.concatenate(a) for a in assignment], spec.train_fraction, rng)


def dirichlet_assignment(labels: np.ndarray, num_classes: int, spec: PartitionSpec, rng) -> list[np.ndarray]:
    n = spec.num_clients
    floor = spec.min_samples if spec.min_samples is not None else max(num_classes, 8)
    if floor * n > len(labels):
        raise ValueError(f"cannot give {n} clients {floor} samples each from {len(labels)}")
    by_class = [rng.permutation(np.flatnonzero(labels == c)) for c in range(num_classes)]
    for _ in range(spec.max_retries):
        counts = np.stack(
            [largest_remainder(len(idx), rng.dirichlet(np.full(n, spec.alpha))) for idx in by_class]
        )
        if counts.sum(axis=0).min() >= floor:
            break
    else:
        raise RuntimeError(
            f"Dirichlet partition: no draw gave every client >= {floor} samples in {spec.max_retries} tries"
        )
    assignment: list[list[np.ndarray]] = [[] for _ in range(n)]
    for c, idx in enumerate(by_class):
        bounds = np.concatenate([[0], np.cumsum(counts[c])])
        for i in range(n):
            assignment[i].append(idx[bounds[i] : bounds[i + 1]])
    return [np.concatenate(a) for a in assignment]


def partition_dirichlet(ds: Dataset, spec: PartitionSpec, rng: np.random.Generator) -> list[ClientDataset]:
    """Per class, client proportions ~ Dir(alpha), rounded by largest remainder."""
    assignment = dirichlet_assignment(ds.labels, ds.num_classes, spec, rng)
    return _client_datasets(ds, assignment, spec.train_fraction, rng)


def partition(ds: Dataset, spec: PartitionSpec, rng: np.random.Generator) -> list[ClientDataset]:
    if spec.kind == "pathological":
        return partition_pathological(ds, spec, rng)
    return partition_dirichlet(ds, spec, rng)


def split_train_test(
    ds: Dataset, client_id: int, indices: np.ndarray, fraction: float, rng: np.random.Generator
) -> ClientDataset:
    """Stratified split of one client's indices, largest-remainder rounding per class."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    indices = np.asarray(indices, dtype=np.int64)
    labels = ds.labels[indices]
    classes = np.unique(labels)
    per_class = [rng.permutation(indices[labels == c]) for c in classes]
    sizes = np.array([len(p) for p in per_class])
    n_train_total = round_half_up(fraction * len(indices))
    n_train = largest_remainder(n_train_total, sizes) if len(indices) else sizes
    # keep at least one train sample per held class where the class has any
    train, test = [], []
    for p, k in zip(per_class, n_train):
        k = max(int(k), 1) if len(p) else 0
        train.append(p[:k])
        test.append(p[k:])
    train_idx = np.sort(np.concatenate(train)) if train else np.array([], dtype=np.int64)
    test_idx = np.sort(np.concatenate(test)) if test else np.array([], dtype=np.int64)
    if len(test_idx) == 0:
        warnings.warn(f"client {client_id} has an empty test split", stacklevel=2)
    hist = np.bincount(labels, minlength=ds.num_classes)
    return ClientDataset(
        client_id,
        train_idx,
        test_idx,
        ds.samples[train_idx],
        ds.labels[train_idx],
        ds.samples[test_idx],
        ds.labels[test_idx],
        hist,
    )
