"""CIFAR-10 binary ingestion, seeded batching, and PPM figure grids."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ArgumentError, FormatError, ShapeError
from .serialization import read_tensor_file
from .tensor import Tensor, derive_seed, philox

RECORD_BYTES = 3073
IMAGE_BYTES = 3072
NUM_CLASSES = 10


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32 in [0, 1]
    labels: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.images)

    def subset(self, count: int, start: int = 0) -> "Dataset":
        if start < 0 or count < 0 or start + count > len(self):
            raise ArgumentError(f"subset [{start}, {start + count}) outside dataset of {len(self)}")
        labels = None if self.labels is None else self.labels[start:start + count]
        return Dataset(self.images[start:start + count], labels)

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]


def parse_cifar10_bytes(data: bytes, source: str = "<bytes>") -> Dataset:
    """Parse concatenated records: 1 label byte, then 1024 R, 1024 G, 1024 B bytes (row-major 32x32)."""
    if len(data) % RECORD_BYTES:
        expected = (len(data) // RECORD_BYTES + 1) * RECORD_BYTES
        raise FormatError(
            f"{source}: {len(data)} bytes is not a multiple of the {RECORD_BYTES}-byte record "
            f"(expected {expected - RECORD_BYTES} or {expected} bytes)"
        )
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"{source}: record {i} has label {labels[i]} > 9", i * RECORD_BYTES)
    pixels = records[:, 1:].reshape(-1, 3, 32, 32)
    return Dataset(pixels.astype(np.float32) / np.float32(255.0), labels)


def load_cifar10_bin(paths: str | Path | Sequence) -> Dataset:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    parts = [parse_cifar10_bytes(Path(p).read_bytes(), str(p)) for p in paths]
    if not parts:
        raise ArgumentError("no CIFAR-10 files given")
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]))


def to_bytes(images: np.ndarray) -> np.ndarray:
    """Inverse of the /255 normalization: round to the nearest byte."""
    return np.clip(np.floor(np.asarray(images, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def cifar10_bytes(dataset: Dataset) -> bytes:
    """Serialize back into the CIFAR-10 record layout."""
    n = len(dataset)
    if dataset.images.shape[1:] != (3, 32, 32):
        raise ShapeError(f"CIFAR-10 records hold 3x32x32 images, got {dataset.images.shape[1:]}")
    labels = np.zeros(n, np.uint8) if dataset.labels is None else dataset.labels.astype(np.uint8)
    records = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = to_bytes(dataset.images).reshape(n, IMAGE_BYTES)
    return records.tobytes()


def load_tensor_dataset(path) -> Dataset:
    """Images (N, 3, H, W) from a raw tensor file, e.g. a 64x64 set for the larger config."""
    _, arr = read_tensor_file(path)
    if arr.ndim != 4 or arr.shape[1] != 3 or arr.dtype.kind != "f":
        raise FormatError(f"{path}: expected a float (N, 3, H, W) tensor, got {arr.dtype} {arr.shape}")
    return Dataset(arr.astype(np.float32))


def load_images(paths) -> Dataset:
    """Dispatch on extension: ``.bin`` is CIFAR-10 records, anything else a raw tensor file."""
    if isinstance(paths, (str, Path)):
        paths = [p for p in str(paths).split(",") if p]
    paths = [Path(p) for p in paths]
    if all(p.suffix == ".bin" for p in paths):
        return load_cifar10_bin(paths)
    if len(paths) != 1:
        raise ArgumentError("raw tensor datasets are read from a single file")
    return load_tensor_dataset(paths[0])


class BatchIterator:
    """Seeded per-epoch permutations; the final short batch is kept."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int = 0, dtype=np.float32):
        if batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")
        if len(dataset) == 0:
            raise ArgumentError("cannot batch an empty dataset")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.dtype = dtype
        self.epoch = 0

    def __len__(self):
        return math.ceil(len(self.dataset) / self.batch_size)

    def epoch_order(self, epoch: int) -> np.ndarray:
        return philox(derive_seed(self.seed, epoch)).permutation(len(self.dataset))

    def epoch_batches(self, epoch: int) -> Iterator[np.ndarray]:
        order = self.epoch_order(epoch)
        for i in range(0, len(order), self.batch_size):
            yield order[i:i + self.batch_size]

    def __iter__(self) -> Iterator[Tensor]:
        for idx in self.epoch_batches(self.epoch):
            yield Tensor(self.dataset.images[idx], dtype=self.dtype)
        self.epoch += 1


def batches(dataset: Dataset, batch_size: int, seed: int = 0, epoch: int = 0) -> Iterator[Tensor]:
    it = BatchIterator(dataset, batch_size, seed)
    it.epoch = epoch
    return iter(it)


# ---------------------------------------------------------------- PPM output


def grid_shape(n: int, cols: int | None = None) -> tuple:
    """(rows, cols); the default column count is the nearest square, ceil(sqrt(n))."""
    if n < 1:
        raise ArgumentError("grid needs at least one image")
    cols = cols or math.ceil(math.sqrt(n))
    if cols < 1:
        raise ArgumentError("cols must be >= 1")
    return math.ceil(n / cols), cols


def ppm_grid_bytes(images, cols: int | None = None) -> bytes:
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ShapeError(f"expected (N, 3, h, w) images, got {arr.shape}")
    n, _, h, w = arr.shape
    rows, cols = grid_shape(n, cols)
    canvas = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    tiles = to_bytes(arr).transpose(0, 2, 3, 1)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, cols)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = tile
    header = f"P6\n{cols * w} {rows * h}\n255\n".encode("ascii")
    return header + canvas.tobytes()


def write_ppm_grid(images, cols: int | None, path) -> None:
    Path(path).write_bytes(ppm_grid_bytes(images, cols))


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file written by :func:`write_ppm_grid` into (height, width, 3) uint8."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM", 0)
    width, height = (int(v) for v in parts[1].split())
    if parts[2] != b"255":
        raise FormatError(f"{path}: unsupported maxval {parts[2]!r}")
    payload = parts[3]
    if len(payload) != width * height * 3:
        raise FormatError(f"{path}: payload {len(payload)} bytes, expected {width * height * 3}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
