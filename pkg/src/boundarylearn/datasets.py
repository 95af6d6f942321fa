"""IDX-format dataset loading and epoch shuffling/partitioning.

Handles the big-endian IDX container used by the MNIST-family datasets
(magic 2051 for image files, 2049 for label files), with transparent gzip
decompression, pixel scaling into [0, 1], and row-major flattening of the
28x28 images to 784-vectors.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "IMAGE_MAGIC",
    "LABEL_MAGIC",
    "Dataset",
    "load_idx_images",
    "load_idx_labels",
    "to_dataset",
    "load_dataset_dir",
    "shuffle_partition",
]

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

# Official archive names, tried with and without .gz.
_SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    """Flattened, normalized point set with integer labels.

    Invariants: one label per point, all labels below ``n_classes``, all
    features inside [0, 1].
    """

    points: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = ""

    def __post_init__(self):
        if self.points.shape[0] != self.labels.shape[0]:
            raise ValueError("points and labels disagree on the number of samples")
        if self.labels.size and int(self.labels.max()) >= self.n_classes:
            raise ValueError("label outside the declared class count")

    def __len__(self):
        return self.points.shape[0]


def _read_bytes(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx_images(path):
    """Parse an IDX image file into a (count, rows, cols) uint8 array.

    The header is big-endian: u32 magic 2051, u32 count, u32 rows,
    u32 cols, followed by the pixel payload.
    """
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack_from(">i", raw, 0)
    if magic != IMAGE_MAGIC:
        raise ValueError(f"{path}: expected image magic {IMAGE_MAGIC}, got {magic}")
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated IDX header")
    magic, count, rows, cols = struct.unpack_from(">4i", raw, 0)
    expected = 16 + count * rows * cols
    if len(raw) < expected:
        raise ValueError(f"{path}: truncated payload ({len(raw)} bytes, need {expected})")
    return np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16).reshape(
        count, rows, cols
    )


def load_idx_labels(path):
    """Parse an IDX label file into a (count,) uint8 array (magic 2049)."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack_from(">i", raw, 0)
    if magic != LABEL_MAGIC:
        raise ValueError(f"{path}: expected label magic {LABEL_MAGIC}, got {magic}")
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated IDX header")
    magic, count = struct.unpack_from(">2i", raw, 0)
    if len(raw) < 8 + count:
        raise ValueError(f"{path}: truncated payload ({len(raw)} bytes, need {8 + count})")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8)


def to_dataset(images, labels, n_classes=None, name=""):
    """Flatten images row-major and scale pixel bytes by 1/255 into [0, 1]."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    points = images.reshape(images.shape[0], -1).astype(np.float32) / np.float32(255.0)
    labels = labels.astype(np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 0
    return Dataset(points=points, labels=labels, n_classes=int(n_classes), name=name)


def _find_file(directory, stem):
    directory = Path(directory)
    for candidate in (stem, stem + ".gz", stem.replace("-idx", ".idx"),
                      stem.replace("-idx", ".idx") + ".gz"):
        path = directory / candidate
        if path.exists():
            return path
    raise FileNotFoundError(f"no {stem}[.gz] under {directory}")


def load_dataset_dir(directory, split="train", n_classes=10, name=""):
    """Load one split from a directory using the official MNIST file names."""
    if split not in _SPLIT_FILES:
        raise ValueError(f"split must be one of {sorted(_SPLIT_FILES)}, got {split!r}")
    image_stem, label_stem = _SPLIT_FILES[split]
    images = load_idx_images(_find_file(directory, image_stem))
    labels = load_idx_labels(_find_file(directory, label_stem))
    return to_dataset(images, labels, n_classes=n_classes, name=name or f"{split}")


def shuffle_partition(n_items, chunk_size, rng):
    """Seeded permutation of ``range(n_items)`` cut into full chunks.

    The ragged tail that cannot fill a chunk is dropped, so every returned
    chunk has exactly ``chunk_size`` disjoint indices.  ``rng`` may be a
    seed or a ``numpy.random.Generator`` (PCG64 is the project-wide
    generator, so a fixed seed reproduces the same chunks on any platform).
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if chunk_size > n_items:
        raise ValueError(f"chunk_size {chunk_size} exceeds dataset size {n_items}")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    order = gen.permutation(n_items)
    n_chunks = n_items // chunk_size
    return [order[i * chunk_size : (i + 1) * chunk_size] for i in range(n_chunks)]
