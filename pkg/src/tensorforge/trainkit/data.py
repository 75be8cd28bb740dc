"""CIFAR-10 binary loading and prefetching mini-batch iteration."""

from __future__ import annotations

import os
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ArgumentError, FormatError, IterationError

RECORD = 3073
PLANE = 1024
NUM_CLASSES = 10
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)


def one_hot(labels, classes: int = NUM_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, classes), np.float32)
    out[np.arange(labels.size), labels] = 1.0
    return out


@dataclass
class DatasetSplit:
    """Host-resident split: NHWC uint8 images and one-hot float32 labels."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise ArgumentError(f"images must be uint8 [N,H,W,C], got {self.images.dtype} "
                                f"{self.images.shape}")
        if self.labels.shape != (self.images.shape[0], NUM_CLASSES):
            raise ArgumentError(f"labels shape {self.labels.shape} does not match "
                                f"{self.images.shape[0]} images")

    def __len__(self):
        return self.images.shape[0]

    @property
    def class_ids(self) -> np.ndarray:
        return self.labels.argmax(axis=1)

    def subset(self, n: int | None) -> "DatasetSplit":
        """The first ``n`` records (all of them when n is None)."""
        if n is None or n >= len(self):
            return self
        if n < 1:
            raise ArgumentError(f"subset size must be >= 1, got {n}")
        return DatasetSplit(self.images[:n], self.labels[:n])

    def buffered_iter(self, eg, batch_size: int, seed=0, shuffle: bool = True,
                      drop_last: bool = True) -> "BufferedIter":
        return BufferedIter(self, eg, batch_size, seed, shuffle, drop_last)


def decode_records(raw: bytes, source: str = "<bytes>") -> DatasetSplit:
    if len(raw) % RECORD:
        whole = len(raw) // RECORD
        raise FormatError(f"{source}: truncated record at offset {whole * RECORD} "
                          f"({len(raw)} bytes is not a multiple of {RECORD})")
    rec = np.frombuffer(raw, np.uint8).reshape(-1, RECORD)
    labels = rec[:, 0]
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{source}: label byte {labels[bad[0]]} out of range at offset "
                          f"{int(bad[0]) * RECORD}")
    # three row-major 32x32 planes (R, G, B) -> NHWC
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return DatasetSplit(np.ascontiguousarray(images), one_hot(labels))


def encode_records(images: np.ndarray, labels) -> bytes:
    images = np.asarray(images, np.uint8)
    labels = np.asarray(labels, np.uint8).reshape(-1, 1)
    planes = images.transpose(0, 3, 1, 2).reshape(images.shape[0], 3 * PLANE)
    return np.concatenate([labels, planes], axis=1).tobytes()


def read_batch_file(path) -> DatasetSplit:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"{path}: missing CIFAR-10 batch file")
    return decode_records(path.read_bytes(), str(path))


def _concat(splits) -> DatasetSplit:
    return DatasetSplit(np.concatenate([s.images for s in splits]),
                        np.concatenate([s.labels for s in splits]))


def cifar10_load(directory) -> tuple[DatasetSplit, DatasetSplit]:
    d = Path(directory)
    if (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    train = _concat([read_batch_file(d / f) for f in TRAIN_FILES])
    test = _concat([read_batch_file(d / f) for f in TEST_FILES])
    return train, test


def write_cifar10_dir(directory, train: DatasetSplit, test: DatasetSplit) -> Path:
    """Write splits in the CIFAR-10 binary layout (train spread over five files)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    chunks = np.array_split(np.arange(len(train)), len(TRAIN_FILES))
    for name, idx in zip(TRAIN_FILES, chunks):
        (d / name).write_bytes(encode_records(train.images[idx], train.class_ids[idx]))
    (d / TEST_FILES[0]).write_bytes(encode_records(test.images, test.class_ids))
    return d


def synthetic_split(n: int, seed: int = 0, noise: float = 40.0) -> DatasetSplit:
    """Learnable CIFAR-shaped data: each class is a fixed random template plus pixel noise."""
    rng = np.random.default_rng(seed)
    templates = rng.integers(40, 216, size=(NUM_CLASSES, 32, 32, 3))
    labels = np.arange(n) % NUM_CLASSES
    rng.shuffle(labels)
    imgs = templates[labels] + rng.normal(0, noise, size=(n, 32, 32, 3))
    return DatasetSplit(np.clip(np.rint(imgs), 0, 255).astype(np.uint8), one_hot(labels))


def find_cifar10(data_dir=None) -> Path | None:
    candidates = [data_dir, os.environ.get("TENSORFORGE_CIFAR10_DIR"), "data/cifar-10-batches-bin",
                  "data"]
    for c in candidates:
        if not c:
            continue
        p = Path(c)
        for q in (p, p / "cifar-10-batches-bin"):
            if all((q / f).is_file() for f in TRAIN_FILES + TEST_FILES):
                return q
    return None


class BufferedIter:
    """Mini-batch iterator that prepares the next batch on a helper thread.

    Host-side gathering overlaps with the caller's work; ``next`` uploads the prepared batch
    and returns ``(x uint8 tensor [B,32,32,3], y float32 one-hot [B,10])``.
    """

    def __init__(self, split: DatasetSplit, eg, batch_size: int, seed=0, shuffle: bool = True,
                 drop_last: bool = True):
        if batch_size < 1:
            raise ArgumentError(f"batch size must be >= 1, got {batch_size}")
        self.split = split
        self.eg = eg
        self.batch_size = batch_size
        self.drop_last = drop_last
        self._rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
        self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="prefetch")
        self._pending: Future | None = None
        self.order = np.arange(len(split))
        self.cursor = 0
        self.reset(shuffle)

    def __len__(self):
        n = len(self.split)
        return n // self.batch_size if self.drop_last else -(-n // self.batch_size)

    def _batch_indices(self, start: int) -> np.ndarray:
        return self.order[start:start + self.batch_size]

    def _gather(self, idx):
        return (np.ascontiguousarray(self.split.images[idx]),
                np.ascontiguousarray(self.split.labels[idx]))

    def _schedule(self):
        if self.has_next():
            self._pending = self._pool.submit(self._gather, self._batch_indices(self.cursor))
        else:
            self._pending = None

    def reset(self, shuffle: bool = True) -> "BufferedIter":
        if self._pending is not None:
            self._pending.cancel()
            self._pending = None
        n = len(self.split)
        self.order = self._rng.permutation(n) if shuffle else np.arange(n)
        self.cursor = 0
        self._schedule()
        return self

    def has_next(self) -> bool:
        remaining = len(self.split) - self.cursor
        return remaining >= self.batch_size if self.drop_last else remaining > 0

    hasNext = has_next

    def next(self):
        if not self.has_next():
            raise IterationError("iterator exhausted; call reset()")
        fut = self._pending
        images, labels = fut.result() if fut is not None else self._gather(
            self._batch_indices(self.cursor))
        self.cursor += len(images)
        self._schedule()
        return self.eg.tensor(images, dtype="int8"), self.eg.tensor(labels)

    def __iter__(self):
        return self

    def __next__(self):
        return self.next()

    def close(self):
        self._pool.shutdown(wait=True)
