"""Datasets, label-skewed client partitions and IDX ingestion."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .distributions import ClientProfile
from .errors import IdxCountMismatch, IdxMagicError, IdxTruncatedError, PartitionInfeasible

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
NATIVE = -1


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, d) float64 in [0, 1] for image data
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise ValueError(f"features {x.shape} do not match labels {y.shape}")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.size

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class ClientDataset:
    """Samples held by one client; ``origin`` is ``-1`` for native samples,
    otherwise the id of the head that shared the sample."""

    client_id: int
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    origin: np.ndarray = field(default=None)
    source_index: np.ndarray = field(default=None)

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            x = x.reshape(y.size, -1)
        origin = np.full(y.size, NATIVE, dtype=np.int64) if self.origin is None else np.asarray(self.origin, dtype=np.int64)
        src = np.full(y.size, -1, dtype=np.int64) if self.source_index is None else np.asarray(self.source_index, dtype=np.int64)
        if not (x.shape[0] == y.size == origin.size == src.size):
            raise ValueError("sample arrays disagree in length")
        for name, arr in (("features", x), ("labels", y), ("origin", origin), ("source_index", src)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_k(self) -> int:
        return int(self.labels.size)

    @property
    def native_mask(self) -> np.ndarray:
        return self.origin == NATIVE

    def native(self) -> "ClientDataset":
        m = self.native_mask
        return ClientDataset(self.client_id, self.features[m], self.labels[m], self.num_classes, self.origin[m], self.source_index[m])

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def profile(self) -> ClientProfile:
        return ClientProfile.from_labels(self.client_id, self.labels, self.num_classes)


def profiles_of(datasets: Sequence[ClientDataset]) -> list[ClientProfile]:
    return [d.profile() for d in datasets]


def _client(dataset: Dataset, client_id: int, idx) -> ClientDataset:
    idx = np.sort(np.asarray(idx, dtype=np.int64))
    return ClientDataset(
        client_id,
        dataset.features[idx],
        dataset.labels[idx],
        dataset.num_classes,
        source_index=idx,
    )


def _largest_size(drawn_labels: np.ndarray, counts: np.ndarray, per_class: np.ndarray, n_mixed: int, cap: int) -> int:
    """Largest per-client size for which the single-class clients still fit
    after the mixed clients take the first ``n_mixed * size`` drawn samples."""
    Y = counts.size
    onehot = np.zeros((drawn_labels.size + 1, Y), dtype=np.int64)
    if drawn_labels.size:
        onehot[np.arange(1, drawn_labels.size + 1), drawn_labels] = 1
    taken = np.cumsum(onehot, axis=0)  # taken[t] = class counts of the first t draws
    for size in range(cap, 0, -1):
        if np.all(counts - taken[min(n_mixed * size, drawn_labels.size)] >= per_class * size):
            return size
    return 0


def partition_pathological(
    dataset: Dataset,
    K: int,
    n_single: int,
    seed,
    samples_per_client: int | None = None,
) -> list[ClientDataset]:
    """Split into ``n_single`` single-class clients and ``K - n_single`` mixed ones.

    Mixed clients first draw ``samples_per_client`` samples each uniformly
    without replacement from the whole dataset; by default that size is the
    largest one that leaves the single-class clients enough samples. Client ``i < n_single``
    then takes the same number from class ``i mod Y``. Leftover samples are
    dealt round-robin to the mixed clients so the partition stays
    exhaustive; with no mixed clients each class's leftover goes round-robin
    to that class's clients.
    """
    Y = dataset.num_classes
    n = len(dataset)
    if K < 1 or not 0 <= n_single <= K:
        raise ValueError("need K >= 1 and 0 <= n_single <= K")
    n_mixed = K - n_single
    rng = np.random.default_rng(seed)
    counts = dataset.class_counts()
    per_class = np.bincount(np.arange(n_single) % Y, minlength=Y)
    order = rng.permutation(n)
    if samples_per_client is None:
        size = _largest_size(dataset.labels[order], counts, per_class, n_mixed, n // K)
    else:
        size = int(samples_per_client)
    if size < 1 or size * K > n:
        raise PartitionInfeasible(f"cannot give each of {K} clients {size} samples out of {n}")

    owned: list[list[int]] = [[] for _ in range(K)]
    free = np.ones(n, dtype=bool)
    if n_mixed:
        drawn = order[: n_mixed * size]
        for r in range(n_mixed):
            owned[n_single + r] = drawn[r * size : (r + 1) * size].tolist()
        free[drawn] = False
    pools = []
    for j in range(Y):
        pool = rng.permutation(np.flatnonzero(free & (dataset.labels == j)))
        need = per_class[j] * size
        if pool.size < need:
            raise PartitionInfeasible(f"class {j} has {pool.size} free samples, {need} needed")
        pools.append(pool)
    taken = np.zeros(Y, dtype=np.int64)
    for i in range(n_single):
        j = i % Y
        owned[i] = pools[j][taken[j] : taken[j] + size].tolist()
        taken[j] += size

    if n_mixed:
        rest = np.sort(np.concatenate([pools[j][taken[j] :] for j in range(Y)]))
        rest = rng.permutation(rest)
        for t, idx in enumerate(rest):
            owned[n_single + t % n_mixed].append(int(idx))
    else:
        for j in range(Y):
            left = pools[j][taken[j] :]
            if left.size and per_class[j] == 0:
                raise PartitionInfeasible(f"class {j} has samples but no client to hold them")
            holders = [i for i in range(n_single) if i % Y == j]
            for t, idx in enumerate(left):
                owned[holders[t % len(holders)]].append(int(idx))
    return [_client(dataset, k, owned[k]) for k in range(K)]


def partition_dirichlet(dataset: Dataset, K: int, alpha: float, seed, samples_per_client: int | None = None) -> list[ClientDataset]:
    """Equal-size clients whose label proportions follow a symmetric Dirichlet(alpha).

    Each client draws its proportions, then takes samples class by class from
    the shuffled pools; when a class runs dry the deficit is refilled from
    the classes that still have samples. Leftover samples are dealt
    round-robin so the partition stays exhaustive.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if K < 1:
        raise ValueError("K must be at least 1")
    Y = dataset.num_classes
    n = len(dataset)
    size = n // K if samples_per_client is None else int(samples_per_client)
    if size < 1 or size * K > n:
        raise PartitionInfeasible(f"cannot give {K} clients {size} samples each from {n}")
    rng = np.random.default_rng(seed)
    pools = [list(rng.permutation(np.flatnonzero(dataset.labels == j))) for j in range(Y)]
    owned: list[list[int]] = [[] for _ in range(K)]
    props = rng.dirichlet(np.full(Y, float(alpha)), size=K)
    for k in range(K):
        want = _round_counts(props[k], size)
        for j in range(Y):
            take = min(want[j], len(pools[j]))
            owned[k].extend(pools[j][:take])
            del pools[j][:take]
            want[j] -= take
        deficit = int(want.sum())
        while deficit:
            avail = np.array([len(p) for p in pools], dtype=np.float64)
            j = int(np.argmax(avail * (props[k] + 1e-12)))
            if avail[j] == 0:
                raise PartitionInfeasible("dataset exhausted")
            owned[k].append(pools[j].pop(0))
            deficit -= 1
    rest = [i for p in pools for i in p]
    for t, idx in enumerate(rest):
        owned[t % K].append(idx)
    return [_client(dataset, k, owned[k]) for k in range(K)]


def _round_counts(p: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder rounding of ``p * total`` to integers summing to ``total``."""
    raw = p * total
    out = np.floor(raw).astype(np.int64)
    rem = total - int(out.sum())
    if rem:
        order = np.argsort(-(raw - out), kind="stable")
        out[order[:rem]] += 1
    return out


def partition_iid(dataset: Dataset, K: int, seed) -> list[ClientDataset]:
    rng = np.random.default_rng(seed)
    parts = np.array_split(rng.permutation(len(dataset)), K)
    return [_client(dataset, k, p) for k, p in enumerate(parts)]


# -- synthetic stand-in --------------------------------------------------------


def synth_dataset(Y: int, samples_per_class: int, feature_dim: int, seed, spread: float = 1.0, separation: float = 4.0) -> Dataset:
    """Gaussian class clusters with unit-norm-separated means.

    Class means are random directions of length ``separation``; features are standard normal
    noise times ``spread`` around them. Classes are interleaved so
    that a prefix of the dataset is itself close to balanced.
    """
    if Y < 1 or samples_per_class < 1 or feature_dim < 1:
        raise ValueError("Y, samples_per_class and feature_dim must be positive")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((Y, feature_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= separation
    labels = np.tile(np.arange(Y), samples_per_class)
    x = means[labels] + spread * rng.standard_normal((labels.size, feature_dim))
    return Dataset(x, labels, Y)


def bits_per_sample(feature_dim: int, bits_per_feature: int = 8, bits_per_label: int = 4) -> int:
    """Transport size of one sample: ``feature_dim * bits_per_feature + bits_per_label``."""
    if feature_dim <= 0 or bits_per_feature <= 0 or bits_per_label <= 0:
        raise ValueError("all arguments must be positive")
    return feature_dim * bits_per_feature + bits_per_label


# -- IDX ----------------------------------------------------------------------


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: truncated dimension header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < size:
        raise IdxTruncatedError(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Read an MNIST-style image/label pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatch(f"{images.shape[0]} images but {labels.shape[0]} labels")
    feats = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(feats, labels.astype(np.int64), num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Encode uint8 images (n, rows, cols) and labels (n,) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def manifest(datasets: Sequence[ClientDataset]) -> list[dict]:
    return [{"client_id": d.client_id, "n_k": d.n_k, "label_histogram": d.label_histogram().tolist()} for d in datasets]


def manifest_json(datasets: Sequence[ClientDataset]) -> str:
    return json.dumps(manifest(datasets), indent=2)
