"""Dataset ingestion and non-IID client partitioning."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import Batch
from .numerics import Stream, rng_stream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SCHEMES = ("iid", "dirichlet", "pathological")


class IDXFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    examples: Batch
    name: str
    num_classes: int

    def __post_init__(self):
        X, y = self.examples
        if len(y) == 0:
            raise ValueError("dataset must hold at least one example")
        if len(X) != len(y):
            raise ValueError("inputs and labels differ in length")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    @property
    def X(self) -> np.ndarray:
        return self.examples.inputs

    @property
    def y(self) -> np.ndarray:
        return self.examples.labels

    def __len__(self) -> int:
        return len(self.examples.labels)

    def subset(self, indices, name: str | None = None) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.intp)
        return LabeledDataset(Batch(self.X[idx], self.y[idx]), name or self.name, self.num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str
    N: int
    seed: int = 0
    alpha_d: float | None = None
    shards_per_client: int | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown partition scheme {self.scheme!r}")
        if self.N < 1:
            raise ValueError("N must be positive")
        if self.scheme == "dirichlet":
            if self.alpha_d is None or not self.alpha_d > 0:
                raise ValueError("dirichlet partition needs alpha_d > 0")
        elif self.alpha_d is not None:
            raise ValueError("alpha_d is only valid for the dirichlet scheme")
        if self.scheme == "pathological":
            if self.shards_per_client is None or self.shards_per_client < 1:
                raise ValueError("pathological partition needs shards_per_client >= 1")
        elif self.shards_per_client is not None:
            raise ValueError("shards_per_client is only valid for the pathological scheme")


@dataclass
class ClientPartition:
    client_id: int
    indices: np.ndarray
    theta: float

    @property
    def size(self) -> int:
        return int(self.indices.shape[0])


# -- IDX ---------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> tuple[tuple[int, ...], np.ndarray]:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXFormatError(f"{what}: truncated header, need {header} bytes at offset 0, have {len(raw)}")
    (found,) = struct.unpack_from(">I", raw, 0)
    if found != magic:
        raise IDXFormatError(f"{what}: bad magic 0x{found:08x} at offset 0 (expected 0x{magic:08x})")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims))
    payload = len(raw) - header
    if payload < count:
        raise IDXFormatError(
            f"{what}: truncated payload, expected {count} bytes from offset {header}, "
            f"file ends at offset {len(raw)}"
        )
    if payload > count:
        raise IDXFormatError(f"{what}: {payload - count} trailing bytes after offset {header + count}")
    data = np.frombuffer(raw, dtype=np.uint8, offset=header, count=count)
    return dims, data.reshape(dims)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels ``(n,)`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())


def load_idx(images_path, labels_path, num_classes: int = 10, name: str = "mnist") -> LabeledDataset:
    """Read an IDX image/label pair (optionally gzip-compressed).

    Pixels are scaled to ``[0, 1]`` and flattened to ``rows * cols`` features.
    """
    (n_img, rows, cols), images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, "images")
    (n_lab,), labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, "labels")
    if n_img != n_lab:
        raise IDXFormatError(
            f"count mismatch: images header (offset 4) says {n_img}, labels header (offset 4) says {n_lab}"
        )
    X = images.reshape(n_img, rows * cols).astype(np.float64) / 255.0
    y = labels.astype(np.intp)
    return LabeledDataset(Batch(X, y), name, num_classes)


# -- synthetic ---------------------------------------------------------------

def make_synthetic(num_classes: int, per_class: int, input_dim: int, separation: float,
                   rng: np.random.Generator, name: str = "synthetic") -> LabeledDataset:
    """Isotropic unit-variance Gaussian blobs.

    Class means are ``separation`` apart: for two classes they sit at
    ``+-separation/2`` along the first axis; otherwise on a scaled simplex
    (``separation / sqrt(2)`` times the standard basis, padded or projected
    to ``input_dim``) so every pair of means is ``separation`` apart when
    ``input_dim >= num_classes``.
    """
    if min(num_classes, per_class, input_dim) < 1:
        raise ValueError("all sizes must be positive")
    means = np.zeros((num_classes, input_dim))
    if num_classes == 2:
        means[0, 0] = -separation / 2.0
        means[1, 0] = separation / 2.0
    else:
        for c in range(num_classes):
            means[c, c % input_dim] += separation / np.sqrt(2.0)
    X = rng.standard_normal((num_classes * per_class, input_dim))
    y = np.repeat(np.arange(num_classes), per_class)
    X += means[y]
    return LabeledDataset(Batch(X, y), name, num_classes)


def train_test_split(dataset: LabeledDataset, train_size: int, test_size: int,
                     rng: np.random.Generator) -> tuple[LabeledDataset, LabeledDataset]:
    """Stratified random split into disjoint train and test subsets."""
    n = len(dataset)
    if train_size + test_size > n:
        raise ValueError(f"requested {train_size}+{test_size} examples from a dataset of {n}")
    y = dataset.y
    order = rng.permutation(n)
    # stable sort by label keeps the random order inside each class
    order = order[np.argsort(y[order], kind="stable")]
    classes, counts = np.unique(y, return_counts=True)
    take_train = _largest_remainder(counts / n * train_size, train_size)
    take_test = _largest_remainder(counts / n * test_size, test_size)
    train_idx, test_idx = [], []
    start = 0
    for cnt, a, b in zip(counts, take_train, take_test):
        block = order[start:start + cnt]
        train_idx.append(block[:a])
        test_idx.append(block[a:a + b])
        start += cnt
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return dataset.subset(train_idx, f"{dataset.name}-train"), dataset.subset(test_idx, f"{dataset.name}-test")


def _largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    base = np.floor(quotas).astype(int)
    short = total - base.sum()
    if short > 0:
        order = np.argsort(-(quotas - base), kind="stable")
        base[order[:short]] += 1
    return base


# -- partitioning ------------------------------------------------------------

def _finish(assign_lists: list[np.ndarray], n: int) -> list[ClientPartition]:
    sizes = [len(a) for a in assign_lists]
    for cid, s in enumerate(sizes):
        if s == 0:
            raise ValueError(
                f"client {cid} received no examples; use a larger dataset or fewer clients"
            )
    total = sum(sizes)
    assert total == n
    return [
        ClientPartition(cid, np.sort(np.asarray(idx, dtype=np.intp)), sizes[cid] / total)
        for cid, idx in enumerate(assign_lists)
    ]


def _iid(y: np.ndarray, spec: PartitionSpec, rng) -> list[np.ndarray]:
    return np.array_split(rng.permutation(len(y)), spec.N)


def _dirichlet_once(y: np.ndarray, spec: PartitionSpec, num_classes: int, rng) -> list[np.ndarray]:
    counts = np.bincount(y, minlength=num_classes)
    prior = counts / counts.sum()
    concentration = spec.alpha_d * prior
    q = np.zeros((spec.N, num_classes))
    present = concentration > 0
    for i in range(spec.N):
        q[i, present] = rng.dirichlet(concentration[present])
    q = np.nan_to_num(q, nan=0.0)
    owner = np.empty(len(y), dtype=np.intp)
    for c in np.flatnonzero(counts):
        members = np.flatnonzero(y == c)
        col = q[:, c]
        mass = col.sum()
        probs = col / mass if mass > 0 else np.full(spec.N, 1.0 / spec.N)
        owner[members] = rng.choice(spec.N, size=len(members), p=probs)
    return [np.flatnonzero(owner == i) for i in range(spec.N)]


def _pathological(y: np.ndarray, spec: PartitionSpec, rng) -> list[np.ndarray]:
    n_shards = spec.N * spec.shards_per_client
    if n_shards > len(y):
        raise ValueError(f"{n_shards} shards requested for {len(y)} examples")
    order = np.argsort(y, kind="stable")
    classes, counts = np.unique(y, return_counts=True)
    if n_shards >= len(classes):
        # label-pure shards: each class gets a share of the shard budget
        per_class = _largest_remainder(counts / counts.sum() * n_shards, n_shards)
        deficit = np.flatnonzero(per_class == 0)
        for c in deficit:
            donor = int(np.argmax(per_class))
            per_class[donor] -= 1
            per_class[c] += 1
        shards = []
        start = 0
        for cnt, k in zip(counts, per_class):
            shards.extend(np.array_split(order[start:start + cnt], k))
            start += cnt
    else:
        shards = np.array_split(order, n_shards)
    perm = rng.permutation(n_shards)
    s = spec.shards_per_client
    return [np.concatenate([shards[j] for j in perm[i * s:(i + 1) * s]]) for i in range(spec.N)]


def partition(dataset: LabeledDataset, spec: PartitionSpec) -> list[ClientPartition]:
    """Split ``dataset`` across ``spec.N`` clients.

    The result is a pure function of ``(dataset, spec)``.  Index sets are
    disjoint, cover the dataset, and carry ``theta_i = D_i / sum_j D_j``.
    """
    n = len(dataset)
    if spec.N > n:
        raise ValueError(f"N={spec.N} exceeds dataset size {n}")
    y = dataset.y
    if spec.scheme == "iid":
        return _finish(_iid(y, spec, rng_stream(spec.seed, Stream.PARTITION)), n)
    if spec.scheme == "pathological":
        return _finish(_pathological(y, spec, rng_stream(spec.seed, Stream.PARTITION)), n)
    last_error = None
    for attempt in range(10):
        assign = _dirichlet_once(y, spec, dataset.num_classes, rng_stream(spec.seed, Stream.PARTITION, attempt))
        try:
            return _finish(assign, n)
        except ValueError as exc:
            last_error = exc
    raise ValueError(f"dirichlet partition left an empty client after 10 attempts: {last_error}")


def label_histograms(dataset: LabeledDataset, parts: list[ClientPartition]) -> np.ndarray:
    """``(N, M)`` matrix of per-client label counts."""
    return np.stack([np.bincount(dataset.y[p.indices], minlength=dataset.num_classes) for p in parts])


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return 0.5 * float(np.abs(p / p.sum() - q / q.sum()).sum())
