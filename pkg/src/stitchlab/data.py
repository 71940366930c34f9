"""Synthetic datasets, IDX ingestion and seeded train/val/test splitting."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stitchlab.errors import FormatError, InvalidInputError
from stitchlab.tensor import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "full"
    # row indices into the parent dataset this split was cut from
    indices: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise InvalidInputError(
                f"inputs {self.inputs.shape} and labels {self.labels.shape} disagree"
            )
        if self.num_classes < 1:
            raise InvalidInputError("num_classes must be >= 1")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidInputError("label outside [0, num_classes)")
        if not np.all(np.isfinite(self.inputs)):
            raise InvalidInputError("non-finite input rows")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        h.update(str(self.num_classes).encode())
        return h.hexdigest()

    def subset(self, rows, split: str | None = None) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.inputs[rows], self.labels[rows], self.num_classes,
                       split or self.split, rows)

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "num_classes": self.num_classes,
            "shape": list(self.inputs.shape),
            "inputs": self.inputs.ravel().tolist(),
            "labels": self.labels.tolist(),
            "indices": None if self.indices is None else self.indices.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Dataset":
        inputs = np.asarray(d["inputs"], dtype=np.float64).reshape(d["shape"])
        idx = d.get("indices")
        return cls(inputs, np.asarray(d["labels"]), d["num_classes"], d["split"],
                   None if idx is None else np.asarray(idx, dtype=np.int64))


def gen_blobs(num_classes: int, per_class: int, input_dim: int, spread: float, seed: int,
              modes_per_class: int = 1) -> Dataset:
    """Isotropic Gaussian clusters; cluster means drawn from N(0, I).

    ``spread`` is the per-coordinate standard deviation around each mean. With
    ``modes_per_class > 1`` every class is a mixture of that many clusters
    (points assigned round-robin), which breaks linear separability.
    """
    if num_classes < 2 or per_class < 1 or input_dim < 1 or modes_per_class < 1:
        raise InvalidInputError(
            "need num_classes >= 2, per_class >= 1, input_dim >= 1, modes_per_class >= 1")
    if spread < 0:
        raise InvalidInputError("spread must be non-negative")
    rng = make_rng(seed)
    means = rng.standard_normal((num_classes * modes_per_class, input_dim))
    noise = rng.standard_normal((num_classes * per_class, input_dim))
    labels = np.repeat(np.arange(num_classes), per_class)
    mode = np.tile(np.arange(per_class) % modes_per_class, num_classes)
    inputs = means[labels * modes_per_class + mode] + spread * noise
    return Dataset(inputs, labels, num_classes)


def gen_spirals(num_classes: int, per_class: int, noise: float, seed: int,
                turns: float = 1.0) -> Dataset:
    """Interleaved 2-D spiral arms, one arm per class, radius in [0.2, 1]."""
    if num_classes < 2 or per_class < 1:
        raise InvalidInputError("need num_classes >= 2 and per_class >= 1")
    if noise < 0:
        raise InvalidInputError("noise must be non-negative")
    rng = make_rng(seed)
    t = np.linspace(0.0, 1.0, per_class)
    radius = 0.2 + 0.8 * t
    xs, ys = [], []
    for c in range(num_classes):
        angle = 2 * np.pi * (c / num_classes + turns * t)
        xs.append(np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1))
        ys.append(np.full(per_class, c))
    inputs = np.concatenate(xs) + noise * rng.standard_normal((num_classes * per_class, 2))
    return Dataset(inputs, np.concatenate(ys), num_classes)


def _read_exact(buf: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(buf):
        raise FormatError(f"truncated file while reading {what}", field=what)
    return buf[offset:offset + n]


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an MNIST-style IDX image/label pair. Pixels are scaled to [0, 1]."""
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()

    (magic,) = struct.unpack(">I", _read_exact(img, 0, 4, "magic"))
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"bad magic 0x{magic:08x} in images file", field="magic")
    n, rows, cols = struct.unpack(">III", _read_exact(img, 4, 12, "header"))
    pixels = _read_exact(img, 16, n * rows * cols, "pixels")

    (lmagic,) = struct.unpack(">I", _read_exact(lab, 0, 4, "magic"))
    if lmagic != IDX_LABELS_MAGIC:
        raise FormatError(f"bad magic 0x{lmagic:08x} in labels file", field="magic")
    (nl,) = struct.unpack(">I", _read_exact(lab, 4, 4, "header"))
    if nl != n:
        raise FormatError(f"count mismatch: {n} images vs {nl} labels", field="count")
    labels = np.frombuffer(_read_exact(lab, 8, nl, "labels"), dtype=np.uint8).astype(np.int64)

    inputs = np.frombuffer(pixels, dtype=np.uint8).astype(np.float64).reshape(n, rows * cols) / 255.0
    k = num_classes if num_classes is not None else int(labels.max()) + 1 if n else 1
    return Dataset(inputs, labels, k)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (N x rows x cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]) + labels.tobytes())


def split(dataset: Dataset, fractions=(0.75, 0.125, 0.125), seed: int = 0):
    """Seeded shuffle followed by a contiguous train/val/test partition."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidInputError(f"fractions must be 3 positive values summing to 1, got {fractions}")
    n = len(dataset)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise InvalidInputError(f"degenerate split of {n} rows: {n_train}/{n_val}/{n_test}")
    perm = make_rng(seed).permutation(n)
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return tuple(dataset.subset(p, name) for p, name in zip(parts, ("train", "val", "test")))
