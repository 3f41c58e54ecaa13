"""Class-incremental continual learning benchmark with cross-stage
adversarial transfer evaluation, model-similarity and complexity analysis."""

__version__ = "0.1.0"

from . import attacks, autodiff, benchmarks, data, defenses, metrics, models, strategies

__all__ = ["attacks", "autodiff", "benchmarks", "data", "defenses", "metrics",
           "models", "strategies", "__version__"]
