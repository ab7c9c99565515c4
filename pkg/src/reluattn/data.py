"""Bit-exact loaders for the MNIST IDX and CIFAR-10 binary formats, plus
deterministic stratified subsetting and seeded batch iteration.

Pixel bytes are scaled by 1/255 into [0, 1] at load time; batches() applies
the fixed (x - 0.5) / 0.5 normalization so the model sees [-1, 1]. Gzipped
files are detected by their magic bytes and decompressed transparently.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataFormatError, UsageError
from .tensor import Array

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixel bytes


@dataclass
class Dataset:
    images: Array  # [N, H, W, C] float32 in [0, 1]
    labels: Array  # [N] int64
    name: str
    split: str
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(
                f"{self.name}/{self.split}: {len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(
                f"{self.name}/{self.split}: label outside [0, {self.num_classes})"
            )

    def __len__(self) -> int:
        return len(self.labels)


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(fh) as gz:
                return gz.read()
        return fh.read()


def load_idx(images_path, labels_path, name: str = "mnist", split: str = "train") -> Dataset:
    """Parse an IDX image/label file pair (big-endian, as published)."""
    raw = _read_bytes(images_path)
    if len(raw) < 16:
        raise DataFormatError(f"{images_path}: truncated IDX image header ({len(raw)} bytes)")
    magic, n, rows, cols = struct.unpack_from(">IIII", raw, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise DataFormatError(
            f"{images_path}: bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"
        )
    expected = 16 + n * rows * cols
    if len(raw) != expected:
        raise DataFormatError(f"{images_path}: {len(raw)} bytes, expected {expected}")
    images = (
        np.frombuffer(raw, dtype=np.uint8, offset=16)
        .reshape(n, rows, cols, 1)
        .astype(np.float32)
        / 255.0
    )

    raw = _read_bytes(labels_path)
    if len(raw) < 8:
        raise DataFormatError(f"{labels_path}: truncated IDX label header ({len(raw)} bytes)")
    magic, n_labels = struct.unpack_from(">II", raw, 0)
    if magic != IDX_LABEL_MAGIC:
        raise DataFormatError(
            f"{labels_path}: bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"
        )
    if len(raw) != 8 + n_labels:
        raise DataFormatError(f"{labels_path}: {len(raw)} bytes, expected {8 + n_labels}")
    if n_labels != n:
        raise DataFormatError(f"image count {n} != label count {n_labels}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(images=images, labels=labels, name=name, split=split)


def load_cifar10(dir_path, split: str) -> Dataset:
    """Read the CIFAR-10 binary batches: 3073-byte records, channels R,G,B."""
    dir_path = Path(dir_path)
    if split == "train":
        files = [dir_path / f"data_batch_{i}.bin" for i in range(1, 6)]
    elif split == "test":
        files = [dir_path / "test_batch.bin"]
    else:
        raise UsageError(f"unknown CIFAR-10 split {split!r} (want 'train' or 'test')")
    images, labels = [], []
    for f in files:
        if not f.exists():
            raise FileNotFoundError(f"missing CIFAR-10 batch file {f}")
        raw = _read_bytes(f)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
            raise DataFormatError(
                f"{f}: {len(raw)} bytes is not a multiple of the {CIFAR_RECORD_BYTES}-byte record"
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels.append(records[:, 0].astype(np.int64))
        # stored planar per channel: 1024 R, 1024 G, 1024 B, each row-major
        imgs = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        images.append(imgs.astype(np.float32) / 255.0)
    return Dataset(
        images=np.concatenate(images),
        labels=np.concatenate(labels),
        name="cifar10",
        split=split,
    )


def subset(ds: Dataset, n: int, seed: int) -> Dataset:
    """Deterministic class-stratified sample of n examples.

    Class counts are balanced to within one where class sizes allow; when a
    class runs out (e.g. n close to the full set) the shortfall spills over
    to classes with spare capacity. n = len(ds) returns the dataset content
    unchanged. Same (seed, n) always selects the same examples.
    """
    if n > len(ds):
        raise UsageError(f"subset size {n} exceeds dataset size {len(ds)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    classes = np.arange(ds.num_classes)
    by_class = {c: np.flatnonzero(ds.labels == c) for c in classes}

    # waterfill: smallest classes first so caps propagate to the rest
    counts = {int(c): 0 for c in classes}
    order = sorted(classes, key=lambda c: len(by_class[c]))
    left = n
    for pos, c in enumerate(order):
        share = left // (len(order) - pos)
        take = min(share, len(by_class[c]))
        counts[int(c)] = take
        left -= take
    extra_order = rng.permutation(classes)
    while left > 0:
        for c in extra_order:
            if left == 0:
                break
            if counts[int(c)] < len(by_class[c]):
                counts[int(c)] += 1
                left -= 1

    chosen = []
    for c in classes:
        take = counts[int(c)]
        if take:
            chosen.append(rng.permutation(by_class[c])[:take])
    idx = np.sort(np.concatenate(chosen)) if chosen else np.empty(0, dtype=np.int64)
    return Dataset(
        images=ds.images[idx],
        labels=ds.labels[idx],
        name=ds.name,
        split=ds.split,
        num_classes=ds.num_classes,
    )


def normalize(images: Array) -> Array:
    """Map [0, 1] pixels to [-1, 1] with the fixed 0.5/0.5 constants."""
    return ((images - 0.5) / 0.5).astype(np.float32)


def batches(ds: Dataset, batch_size: int, epoch_seed: int) -> Iterator[tuple[Array, Array]]:
    """Seeded shuffle, normalized images, final partial batch kept."""
    if batch_size < 1:
        raise UsageError(f"batch_size must be >= 1, got {batch_size}")
    perm = np.random.Generator(np.random.PCG64(epoch_seed)).permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = perm[start : start + batch_size]
        yield normalize(ds.images[idx]), ds.labels[idx]


def num_batches(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)
