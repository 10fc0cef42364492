"""Datasets with stable per-sample ids, IDX parsing and epoch batch plans."""
from __future__ import annotations

import csv
import gzip
import hashlib
import struct
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# the bundled pool is pre-shuffled; [0, 8000) is drawn on for train/val,
# [8000, 10000) is the test split
POOL_TRAIN_REGION = 8000


class IdxParseError(ValueError):
    def __init__(self, path, offset, message):
        super().__init__(f"{path}: {message} (byte offset {offset})")
        self.path = str(path)
        self.offset = offset


class AllMastered(Exception):
    """Raised by ``plan_epoch`` when there is nothing left to train on."""


@dataclass(frozen=True)
class Dataset:
    ids: np.ndarray  # int64, unique
    features: np.ndarray  # [n, d] float64
    labels: np.ndarray  # int64
    split: str = "train"
    n_classes: int = 0
    noisy_ids: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if len(self.ids) != len(self.labels) or len(self.ids) != len(self.features):
            raise ValueError("ids, features and labels must have equal length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("sample ids must be unique")
        if self.features.size and not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if self.n_classes == 0 and len(self.labels):
            object.__setattr__(self, "n_classes", int(self.labels.max()) + 1)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels out of range")

    def __len__(self):
        return len(self.ids)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def take(self, index, split=None) -> "Dataset":
        """Sub-dataset by positional index; ids are kept, not renumbered."""
        index = np.asarray(index)
        noisy = frozenset(int(i) for i in self.ids[index] if int(i) in self.noisy_ids)
        return Dataset(self.ids[index], self.features[index], self.labels[index],
                       split or self.split, self.n_classes, noisy)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.ids.astype("<i8"), self.features.astype("<f8"), self.labels.astype("<i8")):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "label"] + [f"f{k}" for k in range(self.n_features)])
            for sid, label, row in zip(self.ids, self.labels, self.features):
                w.writerow([int(sid), int(label)] + [repr(float(v)) for v in row])


def _read_blob(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(path, expected_magic, kind):
    blob = _read_blob(path)
    if len(blob) < 4:
        raise IdxParseError(path, len(blob), "truncated before magic number")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic != expected_magic:
        raise IdxParseError(path, 0, f"bad magic {magic} for {kind} file, expected {expected_magic}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise IdxParseError(path, len(blob), f"truncated inside {ndim}-dimension header")
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    need = int(np.prod(dims))
    if len(blob) - header < need:
        raise IdxParseError(path, len(blob), f"truncated payload: expected {need} bytes after header, found {len(blob) - header}")
    return dims, np.frombuffer(blob, dtype=np.uint8, count=need, offset=header)


def load_mnist_idx(images_path, labels_path, split="train") -> Dataset:
    """Decode an IDX image/label pair (optionally gzipped) into a Dataset.

    Pixels are scaled to [0, 1]; the sample id is the index in the file.
    """
    img_dims, pixels = _parse_idx(images_path, IMAGES_MAGIC, "images")
    lab_dims, labels = _parse_idx(labels_path, LABELS_MAGIC, "labels")
    if img_dims[0] != lab_dims[0]:
        raise IdxParseError(labels_path, 4, f"count mismatch: {img_dims[0]} images vs {lab_dims[0]} labels")
    n = img_dims[0]
    d = int(np.prod(img_dims[1:]))
    features = pixels.reshape(n, d).astype(np.float64) / 255.0
    return Dataset(np.arange(n, dtype=np.int64), features, labels.astype(np.int64), split, n_classes=10)


def bundled_mnist_paths() -> tuple[Path, Path]:
    root = resources.files("ieslab") / "data"
    return Path(str(root / "mnist10k-images-idx3-ubyte.gz")), Path(str(root / "mnist10k-labels-idx1-ubyte.gz"))


def mnist_splits(train_size=8000, val_size=0, test_size=2000, data_dir=None) -> dict[str, Dataset]:
    """Carve train/val/test out of the 10k pool.

    train = the first ``train_size`` pool entries, val = the last ``val_size``
    entries of the train region, test = the first ``test_size`` entries after it.
    """
    if data_dir is None:
        img, lab = bundled_mnist_paths()
    else:
        img = Path(data_dir) / "mnist10k-images-idx3-ubyte.gz"
        lab = Path(data_dir) / "mnist10k-labels-idx1-ubyte.gz"
    pool = load_mnist_idx(img, lab)
    if train_size + val_size > POOL_TRAIN_REGION:
        raise ValueError(f"train_size + val_size must be <= {POOL_TRAIN_REGION}")
    if test_size > len(pool) - POOL_TRAIN_REGION:
        raise ValueError(f"test_size must be <= {len(pool) - POOL_TRAIN_REGION}")
    out = {
        "train": pool.take(np.arange(train_size), "train"),
        "test": pool.take(np.arange(POOL_TRAIN_REGION, POOL_TRAIN_REGION + test_size), "test"),
    }
    if val_size:
        out["val"] = pool.take(np.arange(POOL_TRAIN_REGION - val_size, POOL_TRAIN_REGION), "val")
    return out


def synth_blobs(n_per_class: int, n_classes: int = 2, spread: float = 1.0, seed: int = 0,
                n_features: int = 2, split: str = "train") -> Dataset:
    """Isotropic Gaussian clusters around centers on a circle of radius 4."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    centers = np.zeros((n_classes, n_features))
    centers[:, 0] = 4 * np.cos(angles)
    if n_features > 1:
        centers[:, 1] = 4 * np.sin(angles)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    features = centers[labels] + spread * rng.standard_normal((len(labels), n_features))
    return Dataset(np.arange(len(labels), dtype=np.int64), features, labels.astype(np.int64), split, n_classes)


def inject_symmetric_noise(ds: Dataset, rate: float, seed: int = 0) -> Dataset:
    """Flip exactly ``round(rate * n)`` labels to a uniformly drawn different class."""
    if not 0 <= rate < 1:
        raise ValueError(f"noise rate must be in [0, 1), got {rate}")
    n = len(ds)
    k = int(round(rate * n))
    if k == 0:
        return ds
    if ds.n_classes < 2:
        raise ValueError("symmetric noise needs at least 2 classes")
    rng = np.random.default_rng(seed)
    picked = rng.choice(n, size=k, replace=False)
    labels = ds.labels.copy()
    # offset in [1, C-1] guarantees a different class, uniform over the others
    offsets = rng.integers(1, ds.n_classes, size=k)
    labels[picked] = (labels[picked] + offsets) % ds.n_classes
    return replace(ds, labels=labels, noisy_ids=frozenset(int(i) for i in ds.ids[picked]))


@dataclass(frozen=True)
class BatchPlan:
    epoch_seed: object
    batches: tuple[np.ndarray, ...]  # sample ids per batch


def plan_epoch(active_ids, batch_size: int, epoch_seed) -> BatchPlan:
    ids = np.sort(np.fromiter(active_ids, dtype=np.int64)) if not isinstance(active_ids, np.ndarray) \
        else np.sort(active_ids.astype(np.int64))
    if len(ids) == 0:
        raise AllMastered("no active samples left: all instances mastered")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(epoch_seed).permutation(ids)
    return BatchPlan(epoch_seed, tuple(order[i:i + batch_size] for i in range(0, len(order), batch_size)))
