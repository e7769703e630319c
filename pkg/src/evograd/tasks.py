"""Small deterministic classification tasks and an IDX reader/writer."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class Kind(str, enum.Enum):
    BLOBS = "blobs"
    TWO_MOONS = "two_moons"
    SPIRALS = "spirals"
    IDX_FILES = "idx"


DEFAULT_NOISE = {Kind.BLOBS: 0.3, Kind.TWO_MOONS: 0.1, Kind.SPIRALS: 0.05, Kind.IDX_FILES: 0.0}


@dataclass(frozen=True)
class TaskSpec:
    kind: Kind = Kind.BLOBS
    n_train: int = 512
    n_val: int = 256
    n_test: int = 256
    noise: float | None = None
    seed: int = 0
    n_classes: int = 2
    # IDX_FILES only: train images/labels, then optional test images/labels.
    paths: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "paths", tuple(self.paths))
        if self.noise is None:
            object.__setattr__(self, "noise", DEFAULT_NOISE[self.kind])

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "n_train": self.n_train,
            "n_val": self.n_val,
            "n_test": self.n_test,
            "noise": self.noise,
            "seed": self.seed,
            "n_classes": self.n_classes,
            "paths": list(self.paths),
        }


@dataclass(frozen=True)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    # Global sample indices of each split, for disjointness checks.
    indices: dict[str, np.ndarray] = field(default_factory=dict, compare=False)

    @property
    def n_features(self) -> int:
        return self.x_train.shape[1]


def chance_accuracy(labels: np.ndarray, n_classes: int | None = None) -> float:
    """Accuracy of always predicting the most frequent label."""
    counts = np.bincount(labels, minlength=n_classes or 0)
    return float(counts.max() / counts.sum())


def _balanced_labels(n: int, n_classes: int) -> np.ndarray:
    return np.arange(n) % n_classes


def _blobs(rng, labels, noise, n_classes):
    angles = 2 * np.pi * labels / n_classes
    centers = 3.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return centers + noise * rng.standard_normal((len(labels), 2))


def _moons(rng, labels, noise, n_classes):
    if n_classes != 2:
        raise ValueError("two_moons has exactly 2 classes")
    t = np.pi * rng.random(len(labels))
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    x = np.where(labels[:, None] == 0, upper, lower)
    return x + noise * rng.standard_normal(x.shape)


def _spirals(rng, labels, noise, n_classes):
    # Radius grows linearly over 1.5 turns; classes are rotated copies.
    t = rng.random(len(labels))
    radius = 0.15 + t
    angle = 3.0 * np.pi * t + 2 * np.pi * labels / n_classes
    x = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    return x + noise * rng.standard_normal(x.shape)


_GENERATORS = {Kind.BLOBS: _blobs, Kind.TWO_MOONS: _moons, Kind.SPIRALS: _spirals}


def _standardize(train: np.ndarray, *others: np.ndarray) -> list[np.ndarray]:
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return [(a - mean) / std for a in (train, *others)]


def generate(spec: TaskSpec) -> Dataset:
    """Build the train/val/test splits; features standardized with train statistics."""
    if spec.kind is Kind.IDX_FILES:
        return _from_idx(spec)
    make = _GENERATORS[spec.kind]
    splits = {}
    offset = 0
    for split_id, (name, n) in enumerate((("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test))):
        rng = np.random.default_rng([spec.seed, split_id])
        labels = rng.permutation(_balanced_labels(n, spec.n_classes))
        splits[name] = (make(rng, labels, spec.noise, spec.n_classes), labels, np.arange(offset, offset + n))
        offset += n
    xs = _standardize(splits["train"][0], splits["val"][0], splits["test"][0])
    return Dataset(
        xs[0], splits["train"][1], xs[1], splits["val"][1], xs[2], splits["test"][1],
        n_classes=spec.n_classes,
        indices={name: s[2] for name, s in splits.items()},
    )


def _from_idx(spec: TaskSpec) -> Dataset:
    if len(spec.paths) not in (2, 4):
        raise ValueError("idx task needs train images/labels and optionally test images/labels")
    x, y = load_idx(spec.paths[0], spec.paths[1])
    n_val = spec.n_val
    if len(spec.paths) == 4:
        x_test, y_test = load_idx(spec.paths[2], spec.paths[3])
        test_idx = np.arange(len(x), len(x) + len(x_test))
    else:
        n_test = spec.n_test
        x, x_test, y, y_test = x[:-n_test], x[-n_test:], y[:-n_test], y[-n_test:]
        test_idx = np.arange(len(x), len(x) + n_test)
    order = np.random.default_rng(spec.seed).permutation(len(x))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if spec.n_train:
        train_idx = train_idx[: spec.n_train]
    xs = _standardize(x[train_idx], x[val_idx], x_test)
    n_classes = int(max(y.max(), y_test.max())) + 1
    return Dataset(
        xs[0], y[train_idx], xs[1], y[val_idx], xs[2], y_test,
        n_classes=n_classes,
        indices={"train": train_idx, "val": val_idx, "test": test_idx},
    )


# -- IDX -------------------------------------------------------------------

class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


def _read_idx(path, magic: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedFileError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise BadMagicError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedFileError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims))
    if len(data) - header < size:
        raise TruncatedFileError(f"{path}: expected {size} bytes of data, found {len(data) - header}")
    return np.frombuffer(data, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label pair; images come back flattened and scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise CountMismatchError(f"count mismatch: {len(images)} images, {len(labels)} labels")
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return x, labels.astype(np.int64)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array of 1 (labels) or 3 (images) dimensions."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("IDX writer only handles unsigned bytes")
    if array.ndim not in (1, 3):
        raise ValueError("expected labels (1-D) or images (3-D)")
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(np.ascontiguousarray(array).tobytes())
