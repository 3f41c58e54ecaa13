"""Dataset ingestion and class-incremental stage streams.

Reads MNIST IDX files and CIFAR-100 binary files bit-exactly as published and
slices them into ordered stages of disjoint class subsets. Pixels are stored
in raw [0,1] space; per-channel normalization lives inside the model graph so
perturbation budgets stay interpretable in pixel units.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MNIST_IMAGE_MAGIC = 2051
MNIST_LABEL_MAGIC = 2049
CIFAR100_RECORD_BYTES = 2 + 3 * 32 * 32


class FormatError(ValueError):
    """File does not follow the expected binary layout."""


class ConsistencyError(ValueError):
    """Images and labels disagree (counts or ids out of range)."""


class ConfigurationError(ValueError):
    """Stage configuration does not fit the dataset."""


class StageRangeError(IndexError):
    """Stage index outside 1..T."""


@dataclass
class LabeledImages:
    """Dense image batch: images [n, c, h, w] in [0,1], integer labels [n]."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ConsistencyError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and int(self.labels.max()) >= self.class_count:
            raise ConsistencyError(
                f"label {int(self.labels.max())} outside class count {self.class_count}")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx: np.ndarray) -> "LabeledImages":
        return LabeledImages(self.images[idx], self.labels[idx], self.class_count)


@dataclass
class StageStream:
    """Ordered train/test stages over pairwise-disjoint class subsets."""

    stages: list[tuple[LabeledImages, LabeledImages]]
    class_map: list[list[int]] = field(default_factory=list)

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def seen_classes(self, upto: int) -> list[int]:
        """Sorted union of class subsets for stages 1..upto."""
        self._check_stage(upto)
        out: list[int] = []
        for t in range(upto):
            out.extend(self.class_map[t])
        return sorted(out)

    def _check_stage(self, t: int):
        if not 1 <= t <= self.num_stages:
            raise StageRangeError(f"stage {t} outside 1..{self.num_stages}")


def _read_idx(path: str, expected_magic: int) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: file shorter than the IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: magic {magic}, expected {expected_magic}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise FormatError(
            f"{path}: expected {count} payload bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist(train_images_path: str, train_labels_path: str,
               test_images_path: str, test_labels_path: str
               ) -> tuple[LabeledImages, LabeledImages]:
    """Decode the four canonical IDX files into [n,1,28,28] float batches."""
    out = []
    for ipath, lpath in ((train_images_path, train_labels_path),
                         (test_images_path, test_labels_path)):
        images = _read_idx(ipath, MNIST_IMAGE_MAGIC)
        labels = _read_idx(lpath, MNIST_LABEL_MAGIC)
        if images.shape[0] != labels.shape[0]:
            raise ConsistencyError(
                f"{ipath}: {images.shape[0]} images vs {labels.shape[0]} labels")
        pixels = (images.astype(np.float32) / 255.0)[:, None, :, :]
        out.append(LabeledImages(pixels, labels.astype(np.int64), 10))
    return out[0], out[1]


def load_cifar100(train_bin_path: str, test_bin_path: str
                  ) -> tuple[LabeledImages, LabeledImages]:
    """Decode CIFAR-100 binary files (coarse byte, fine byte, 3072 pixels)."""
    out = []
    for path in (train_bin_path, test_bin_path):
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) == 0 or len(raw) % CIFAR100_RECORD_BYTES:
            raise FormatError(
                f"{path}: length {len(raw)} is not a positive multiple of "
                f"{CIFAR100_RECORD_BYTES}-byte records")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR100_RECORD_BYTES)
        fine = records[:, 1].astype(np.int64)
        pixels = records[:, 2:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
        out.append(LabeledImages(pixels, fine, 100))
    return out[0], out[1]


def make_stage_stream(train: LabeledImages, test: LabeledImages, stages: int,
                      classes_per_stage: int, class_order: str = "canonical",
                      seed: int = 0) -> StageStream:
    """Partition a benchmark into `stages` chunks of `classes_per_stage` classes.

    Sample order within a stage follows the original dataset order; labels stay
    in the original id space.
    """
    if stages * classes_per_stage != train.class_count:
        raise ConfigurationError(
            f"{stages} stages x {classes_per_stage} classes != "
            f"{train.class_count} benchmark classes")
    if class_order == "canonical":
        order = np.arange(train.class_count)
    elif class_order == "seeded-shuffle":
        order = np.random.Generator(np.random.PCG64(seed)).permutation(train.class_count)
    else:
        raise ConfigurationError(f"unknown class order {class_order!r}")

    class_map = [sorted(int(c) for c in order[t * classes_per_stage:(t + 1) * classes_per_stage])
                 for t in range(stages)]
    stage_list = []
    for subset in class_map:
        member = np.isin(train.labels, subset)
        member_test = np.isin(test.labels, subset)
        stage_list.append((train.subset(np.flatnonzero(member)),
                           test.subset(np.flatnonzero(member_test))))
    return StageStream(stage_list, class_map)


def cumulative_test(stream: StageStream, upto: int) -> LabeledImages:
    """Concatenate the test sets of stages 1..upto in stage order."""
    stream._check_stage(upto)
    parts = [stream.stages[t][1] for t in range(upto)]
    return LabeledImages(
        np.concatenate([p.images for p in parts], axis=0),
        np.concatenate([p.labels for p in parts], axis=0),
        parts[0].class_count)
