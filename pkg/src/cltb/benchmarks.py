"""Benchmark wiring: dataset paths, stage layout and model builders."""

from __future__ import annotations

import os
from dataclasses import dataclass

from . import data, models

BENCHMARKS = ("split-mnist", "split-cifar100")
DATA_ROOT_ENV = "CLTB_DATA_ROOT"


class DatasetMissingError(FileNotFoundError):
    pass


class BenchmarkNameError(ValueError):
    pass


@dataclass(frozen=True)
class BenchmarkInfo:
    name: str
    stages: int
    classes_per_stage: int
    default_epsilon: float
    default_iterations: int


_INFO = {
    "split-mnist": BenchmarkInfo("split-mnist", 5, 2, 0.3, 40),
    "split-cifar100": BenchmarkInfo("split-cifar100", 10, 10, 8 / 255, 10),
}

_FILES = {
    "split-mnist": ["mnist/train-images-idx3-ubyte", "mnist/train-labels-idx1-ubyte",
                    "mnist/t10k-images-idx3-ubyte", "mnist/t10k-labels-idx1-ubyte"],
    "split-cifar100": ["cifar100/train.bin", "cifar100/test.bin"],
}


def info(name: str) -> BenchmarkInfo:
    if name not in _INFO:
        raise BenchmarkNameError(
            f"unknown benchmark {name!r} (expected one of {', '.join(BENCHMARKS)})")
    return _INFO[name]


def resolve_data_root(explicit: str | None = None) -> str:
    root = explicit or os.environ.get(DATA_ROOT_ENV, "")
    if not root:
        raise DatasetMissingError(
            f"no dataset root configured: set [data] root or ${DATA_ROOT_ENV}")
    return root


def dataset_files(name: str, root: str) -> list[str]:
    info(name)
    paths = [os.path.join(root, rel) for rel in _FILES[name]]
    missing = [p for p in paths if not os.path.isfile(p)]
    if missing:
        raise DatasetMissingError(
            f"{name} dataset files missing under {root!r}:\n  " +
            "\n  ".join(missing) +
            "\n(place the published files at these paths, or point "
            f"${DATA_ROOT_ENV} at the directory that holds them)")
    return paths


def load_stream(name: str, root: str, class_order: str = "canonical",
                seed: int = 0) -> data.StageStream:
    meta = info(name)
    paths = dataset_files(name, root)
    if name == "split-mnist":
        train, test = data.load_mnist(*paths)
    else:
        train, test = data.load_cifar100(*paths)
    return data.make_stage_stream(train, test, meta.stages, meta.classes_per_stage,
                                  class_order, seed)


def model_builder(name: str):
    """Stage-model factory; benchmark models normalize inputs inside the graph
    (pixels stay raw [0,1] on disk and in attack space)."""
    info(name)
    if name == "split-mnist":
        return lambda seed: models.build_mlp(seed=seed, normalization="mnist")
    return lambda seed: models.build_smallcnn(seed=seed)


def model_builder_for_arch(arch_id: str):
    return lambda seed: models.build_from_arch_id(arch_id, seed=seed)


def benchmark_for_arch(arch_id: str) -> str:
    if arch_id.startswith("mlp-"):
        return "split-mnist"
    if arch_id.startswith("smallcnn-"):
        return "split-cifar100"
    raise BenchmarkNameError(f"cannot infer benchmark from architecture {arch_id!r}")
