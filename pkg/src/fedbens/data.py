"""Datasets, IDX/CSV I/O, normalization and non-IID client partitioning."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class FormatError(ValueError):
    """A data file is malformed; the message names the offending field."""


class PartitionError(RuntimeError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    provenance: str = "synthetic"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (N, d_in) with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes, self.provenance)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


def gen_synthetic_blobs(
    n_classes: int,
    d_in: int,
    n_per_class: int,
    spread: float,
    seed: int,
    sample_seed: int | None = None,
) -> Dataset:
    """Isotropic Gaussian blobs, one per class, centred at 2 * (random unit vector).

    ``seed`` fixes the class centres; ``sample_seed`` (default ``seed``) fixes the
    draws, so a held-out set from the same distribution uses the same ``seed``
    and a different ``sample_seed``.
    """
    if n_classes < 2 or d_in < 2:
        raise ValueError("need n_classes >= 2 and d_in >= 2")
    centres = np.random.default_rng(seed).standard_normal((n_classes, d_in))
    centres *= 2.0 / np.linalg.norm(centres, axis=1, keepdims=True)
    rng = np.random.default_rng([seed, seed if sample_seed is None else sample_seed])
    labels = np.repeat(np.arange(n_classes), n_per_class)
    features = centres[labels] + spread * rng.standard_normal((len(labels), d_in))
    return Dataset(features, labels, n_classes, provenance="synthetic")


def _read_exact(buf: bytes, pos: int, n: int, what: str) -> bytes:
    if pos + n > len(buf):
        raise FormatError(f"truncated file: cannot read {what} ({n} bytes at offset {pos}, file has {len(buf)})")
    return buf[pos:pos + n]


def _read_idx(path: str | Path, magic: int, kind: str) -> np.ndarray:
    buf = Path(path).read_bytes()
    (got,) = struct.unpack(">I", _read_exact(buf, 0, 4, f"{kind} magic"))
    if got != magic:
        raise FormatError(f"bad {kind} magic: expected 0x{magic:08X}, got 0x{got:08X}")
    ndim = got & 0xFF
    dims = struct.unpack(f">{ndim}I", _read_exact(buf, 4, 4 * ndim, f"{kind} dimensions"))
    count = int(np.prod(dims))
    payload = _read_exact(buf, 4 + 4 * ndim, count, f"{kind} payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path, n_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair (MNIST layout); pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    k = n_classes if n_classes is not None else int(labels.max()) + 1
    return Dataset(features, labels, k, provenance=str(images_path))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: str | Path, labels_path: str | Path) -> None:
    """Write uint8 images of shape (N, rows, cols) and labels of shape (N,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC))
        f.write(struct.pack(">3I", *images.shape))
        f.write(images.tobytes(order="C"))
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">I", IDX_LABELS_MAGIC))
        f.write(struct.pack(">I", labels.shape[0]))
        f.write(labels.tobytes())


def load_csv(path: str | Path, n_classes: int | None = None) -> Dataset:
    """Read ``f0,...,f{d-1},label`` rows."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[-1] != "label":
            raise FormatError(f"{path}: header must end with 'label'")
        expected = [f"f{i}" for i in range(len(header) - 1)]
        if header[:-1] != expected:
            raise FormatError(f"{path}: feature columns must be named f0..f{len(header) - 2}")
        rows = list(reader)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    features = np.array([[float(v) for v in r[:-1]] for r in rows])
    labels = np.array([int(r[-1]) for r in rows])
    k = n_classes if n_classes is not None else int(labels.max()) + 1
    return Dataset(features, labels, k, provenance=str(path))


def save_csv(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(ds.n_features)] + ["label"])
        for row, label in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray  # 1.0 where the feature is (near) constant

    def apply(self, ds: Dataset) -> Dataset:
        x = (ds.features - self.mean) / self.std
        return Dataset(x, ds.labels, ds.n_classes, ds.provenance)


def fit_normalizer(ds: Dataset, mode: str = "per_feature_standardize") -> Normalizer:
    d = ds.n_features
    if mode == "none":
        return Normalizer(np.zeros(d), np.ones(d))
    if mode != "per_feature_standardize":
        raise ValueError(f"unknown normalization mode {mode!r}")
    if len(ds) < 2:
        raise ValueError("standardization needs at least 2 samples")
    mean = ds.features.mean(axis=0)
    std = ds.features.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    return Normalizer(mean, std)


def normalize(ds: Dataset, mode: str = "per_feature_standardize") -> tuple[Dataset, Normalizer]:
    stats = fit_normalizer(ds, mode)
    return stats.apply(ds), stats


@dataclass
class PartitionPlan:
    assignments: np.ndarray  # client index per sample
    n_clients: int
    alpha: float
    seed: int
    attempts: int = field(default=1)

    def client_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == c)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.n_clients)

    def histogram(self, labels: np.ndarray, n_classes: int) -> np.ndarray:
        """(C, K) matrix of per-client class counts."""
        h = np.zeros((self.n_clients, n_classes), dtype=np.int64)
        np.add.at(h, (self.assignments, labels), 1)
        return h


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` that best match ``proportions * total``."""
    quotas = proportions * total
    counts = np.floor(quotas).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        # stable sort: ties go to the lower index
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(ds: Dataset, n_clients: int, alpha: float, seed: int, max_retries: int = 100) -> PartitionPlan:
    """Per-class symmetric Dirichlet split; redraws with ``seed + attempt`` until no client is empty."""
    if n_clients < 2:
        raise ValueError("need at least 2 clients")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    labels = ds.labels
    for attempt in range(max_retries):
        rng = np.random.default_rng(seed + attempt)
        assign = np.empty(len(labels), dtype=np.int64)
        for k in range(ds.n_classes):
            idx = np.flatnonzero(labels == k)
            if len(idx) == 0:
                continue
            p = rng.dirichlet(np.full(n_clients, alpha))
            counts = largest_remainder(p, len(idx))
            idx = rng.permutation(idx)
            assign[idx] = np.repeat(np.arange(n_clients), counts)
        if np.all(np.bincount(assign, minlength=n_clients) > 0):
            return PartitionPlan(assign, n_clients, alpha, seed, attempts=attempt + 1)
    raise PartitionError(
        f"could not give every one of {n_clients} clients a sample in {max_retries} draws "
        f"(alpha={alpha} too small for N={len(labels)})"
    )


def holdout_server_validation(ds: Dataset, n_val: int = 500, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Split off ``n_val`` uniformly random samples for the server; returns (train, validation)."""
    if not 0 < n_val < len(ds):
        raise ValueError(f"n_val must be in (0, N={len(ds)}), got {n_val}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return ds.subset(train_idx), ds.subset(val_idx)
