import os

import numpy as np
import pytest

from cltb import benchmarks, data

DATA_ROOT = os.environ.get(benchmarks.DATA_ROOT_ENV, "/root/datasets")


def mnist_available() -> bool:
    try:
        benchmarks.dataset_files("split-mnist", DATA_ROOT)
        return True
    except benchmarks.DatasetMissingError:
        return False


needs_mnist = pytest.mark.skipif(not mnist_available(),
                                 reason="MNIST IDX files not present")


@pytest.fixture(scope="session")
def mnist_stream():
    if not mnist_available():
        pytest.skip("MNIST IDX files not present")
    return benchmarks.load_stream("split-mnist", DATA_ROOT)


def _first_n_per_class(ds, per_class):
    keep = []
    for cls in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == cls)
        keep.append(idx[:per_class])
    return ds.subset(np.sort(np.concatenate(keep)))


@pytest.fixture(scope="session")
def tiny_stream(mnist_stream):
    """Subsampled Split-MNIST (fast strategy tests): 150 train / 50 test per class."""
    stages = [(_first_n_per_class(train, 150), _first_n_per_class(test, 50))
              for train, test in mnist_stream.stages]
    return data.StageStream(stages, [list(c) for c in mnist_stream.class_map])
