"""CIFAR-10 binary loading and client partitioning."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import torch

log = logging.getLogger(__name__)

RECORD_BYTES = 1 + 3 * 32 * 32
RECORDS_PER_FILE = 10000
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)
NUM_CLASSES = 10
CHECKSUM_FILE = "checksums.md5"


class DatasetError(Exception):
    pass


class DatasetLoadError(DatasetError):
    pass


class DatasetIntegrityError(DatasetError):
    pass


class PartitionError(Exception):
    pass


@dataclass(frozen=True)
class ImageBatch:
    data: torch.Tensor  # (batch, 3, H, W) in [0, 1]
    labels: torch.Tensor  # (batch,)

    def __post_init__(self) -> None:
        if self.data.dim() != 4 or self.data.shape[1] != 3:
            raise ValueError(f"expected (batch, 3, H, W), got {tuple(self.data.shape)}")
        if self.data.shape[0] < 1:
            raise ValueError("empty batch")
        if self.data.shape[2] % 8 or self.data.shape[3] % 8:
            raise ValueError(f"H and W must be divisible by 8, got {tuple(self.data.shape[2:])}")
        if self.labels.shape != (self.data.shape[0],):
            raise ValueError("labels must have one entry per image")

    def __len__(self) -> int:
        return self.data.shape[0]


def normalize_pixels(raw: np.ndarray) -> torch.Tensor:
    """uint8 pixels -> float32 tensor in [0, 1]."""
    return torch.from_numpy(np.asarray(raw, dtype=np.float32) / 255.0)


class ImageDataset:
    """In-memory uint8 image store; batches are normalized on the way out."""

    def __init__(self, images: np.ndarray, labels: np.ndarray) -> None:
        images = np.ascontiguousarray(images, dtype=np.uint8)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"images must be (N, 3, H, W), got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValueError("labels must have one entry per image")
        self.images = images
        self.labels = labels

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def subset(self, indices: Sequence[int] | np.ndarray) -> "ImageDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return ImageDataset(self.images[idx], self.labels[idx])

    def head_fraction(self, fraction: float, seed: int) -> "ImageDataset":
        """Deterministic random subset holding ``fraction`` of the items."""
        if not 0 < fraction <= 1:
            raise ValueError(f"fraction must be in (0, 1], got {fraction}")
        if fraction == 1:
            return self
        k = max(1, int(round(fraction * len(self))))
        perm = np.random.default_rng(seed).permutation(len(self))[:k]
        return self.subset(np.sort(perm))

    def batch(self, indices: Sequence[int] | np.ndarray) -> ImageBatch:
        idx = np.asarray(indices, dtype=np.int64)
        return ImageBatch(normalize_pixels(self.images[idx]), torch.from_numpy(self.labels[idx]))

    def batches(self, batch_size: int, shuffle: bool = False, seed: int = 0) -> Iterator[ImageBatch]:
        """Yield every item exactly once; order is a pure function of ``seed`` when shuffling."""
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        order = np.random.default_rng(seed).permutation(len(self)) if shuffle else np.arange(len(self))
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start : start + batch_size])

    def __iter__(self) -> Iterator[ImageBatch]:
        return self.batches(32)


def _find_batch_dir(root: Path, names: Sequence[str]) -> Path:
    for cand in (root, root / "cifar-10-batches-bin"):
        if all((cand / n).exists() for n in names):
            return cand
    for cand in (root, root / "cifar-10-batches-bin"):
        for n in names:
            if cand.is_dir() and not (cand / n).exists() and any(cand.glob("*.bin")):
                raise DatasetLoadError(f"missing dataset file: {cand / n}")
    raise DatasetLoadError(f"missing dataset file: {root / 'cifar-10-batches-bin' / names[0]}")


def _read_checksums(path: Path) -> dict[str, str]:
    sums = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if line:
            digest, name = line.split(maxsplit=1)
            sums[name.lstrip("*")] = digest.lower()
    return sums


def load_dataset(
    root: str | Path,
    split: str,
    checksums: Mapping[str, str] | None = None,
    strict: bool = True,
) -> ImageDataset:
    """Read the CIFAR-10 binary layout (``data_batch_{1..5}.bin``, ``test_batch.bin``).

    ``root`` may point at the batch directory itself or at its parent. MD5 digests
    are checked against ``checksums`` or, when absent, a ``checksums.md5`` file next
    to the batches. With ``strict`` every file must hold exactly 10000 records.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    names = TRAIN_FILES if split == "train" else TEST_FILES
    batch_dir = _find_batch_dir(Path(root), names)
    if checksums is None and (batch_dir / CHECKSUM_FILE).exists():
        checksums = _read_checksums(batch_dir / CHECKSUM_FILE)

    images, labels = [], []
    for name in names:
        path = batch_dir / name
        raw = path.read_bytes()
        if checksums and name in checksums:
            digest = hashlib.md5(raw).hexdigest()
            if digest != checksums[name].lower():
                raise DatasetIntegrityError(f"checksum mismatch for {path}: {digest} != {checksums[name]}")
        if len(raw) == 0 or len(raw) % RECORD_BYTES:
            raise DatasetLoadError(f"corrupt dataset file {path}: {len(raw)} bytes is not a whole number of records")
        if strict and len(raw) != RECORD_BYTES * RECORDS_PER_FILE:
            raise DatasetLoadError(f"corrupt dataset file {path}: expected {RECORDS_PER_FILE} records")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
        if rec[:, 0].max() >= NUM_CLASSES:
            raise DatasetLoadError(f"corrupt dataset file {path}: label out of range")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    return ImageDataset(np.concatenate(images), np.concatenate(labels))


def write_cifar_binary(root: str | Path, split: str, images: np.ndarray, labels: np.ndarray) -> Path:
    """Write images in the CIFAR-10 binary layout (train data spread over five files)."""
    out = Path(root) / "cifar-10-batches-bin"
    out.mkdir(parents=True, exist_ok=True)
    images = np.asarray(images, dtype=np.uint8).reshape(len(images), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    names = TRAIN_FILES if split == "train" else TEST_FILES
    for name, chunk in zip(names, np.array_split(rec, len(names))):
        (out / name).write_bytes(chunk.tobytes())
    return out


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "iid"
    alpha: float = 1.0
    num_clients: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("iid", "dirichlet"):
            raise ValueError(f"partition mode must be 'iid' or 'dirichlet', got {self.mode!r}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.mode == "dirichlet" and not self.alpha > 0:
            raise ValueError("alpha must be > 0 for dirichlet partitioning")


@dataclass(frozen=True)
class ClientAssignment:
    client_indices: tuple[np.ndarray, ...]

    @property
    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.client_indices]

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)

    def class_histograms(self, labels: np.ndarray, num_classes: int = NUM_CLASSES) -> np.ndarray:
        labels = np.asarray(labels)
        return np.stack([np.bincount(labels[ix], minlength=num_classes) for ix in self.client_indices])

    def check_cover(self, n_total: int) -> None:
        allidx = np.concatenate(self.client_indices) if self.client_indices else np.empty(0, np.int64)
        if len(allidx) != n_total or not np.array_equal(np.sort(allidx), np.arange(n_total)):
            raise PartitionError("client index sets are not a disjoint cover of the training set")


def partition_iid(labels: Sequence[int] | np.ndarray, num_clients: int, seed: int) -> ClientAssignment:
    n = len(labels)
    if num_clients <= 0:
        raise ValueError("num_clients must be positive")
    if num_clients > n:
        raise ValueError(f"num_clients={num_clients} exceeds the number of samples {n}")
    perm = np.random.default_rng(seed).permutation(n)
    return ClientAssignment(tuple(np.sort(chunk) for chunk in np.array_split(perm, num_clients)))


def _largest_remainder(total: int, probs: np.ndarray) -> np.ndarray:
    exact = probs * total
    counts = np.floor(exact).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # ties on the remainder go to the larger probability, then the lower client id
        order = np.lexsort((np.arange(len(probs)), -probs, -(exact - counts)))
        counts[order[:short]] += 1
    return counts


def partition_dirichlet(
    labels: Sequence[int] | np.ndarray,
    num_clients: int,
    alpha: float,
    seed: int,
    max_retries: int = 100,
) -> ClientAssignment:
    """Split each class over clients by a fresh Dirichlet(alpha) draw.

    Fractional counts are integerized with largest-remainder rounding. If some
    client ends up empty the whole set of per-class draws is resampled, at most
    ``max_retries`` times.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if num_clients <= 0:
        raise ValueError("num_clients must be positive")
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    rng = np.random.default_rng(seed)
    by_class = [rng.permutation(np.flatnonzero(labels == c)) for c in classes]

    for _attempt in range(max_retries + 1):
        buckets: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for idx in by_class:
            probs = rng.dirichlet(np.full(num_clients, float(alpha)))
            counts = _largest_remainder(len(idx), probs)
            bounds = np.concatenate([[0], np.cumsum(counts)])
            for k in range(num_clients):
                buckets[k].append(idx[bounds[k] : bounds[k + 1]])
        parts = tuple(np.sort(np.concatenate(b)) for b in buckets)
        if all(len(p) for p in parts):
            return ClientAssignment(parts)
    raise PartitionError(f"could not find a partition without empty clients in {max_retries} retries")


def make_partition(labels: np.ndarray, spec: PartitionSpec) -> ClientAssignment:
    if spec.mode == "iid":
        return partition_iid(labels, spec.num_clients, spec.seed)
    return partition_dirichlet(labels, spec.num_clients, spec.alpha, spec.seed)


def class_entropy(hist: np.ndarray) -> float:
    p = np.asarray(hist, dtype=np.float64)
    p = p[p > 0] / p.sum()
    return float(-(p * np.log(p)).sum())


def write_partition_manifest(
    path: str | Path, assignment: ClientAssignment, labels: np.ndarray, extra: Mapping | None = None
) -> Path:
    """One JSON record per client: id, size, class histogram and sorted indices."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    hists = assignment.class_histograms(labels)
    with path.open("w", encoding="utf-8") as fh:
        for k, idx in enumerate(assignment.client_indices):
            rec = {
                "client_id": k,
                "size": int(len(idx)),
                "class_histogram": [int(v) for v in hists[k]],
                "indices": [int(i) for i in np.sort(idx)],
            }
            if extra:
                rec.update(extra)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_partition_manifest(path: str | Path) -> ClientAssignment:
    recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    recs.sort(key=lambda r: r["client_id"])
    return ClientAssignment(tuple(np.asarray(r["indices"], dtype=np.int64) for r in recs))
