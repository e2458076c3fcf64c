"""Dataset distillation: compress a training set into a few synthetic
images plus trained learning rates, via meta-optimization through
unrolled gradient descent."""

from . import autodiff, baselines, data, distillation, linear_case, models, objectives

__all__ = [
    "autodiff",
    "baselines",
    "data",
    "distillation",
    "linear_case",
    "models",
    "objectives",
]

__version__ = "0.1.0"
