"""Self-ensemble semantic segmentation at desk scale.

Multi-scale pyramid features feed independent transformer learners whose
per-pixel predictions are merged; everything runs on a small numpy-backed
autodiff engine so every gradient can be checked against finite differences.
"""

__version__ = "0.1.0"

_LAZY = {
    "Tensor": ("senformer.tensor", "Tensor"),
    "no_grad": ("senformer.tensor", "no_grad"),
}


def __getattr__(name):
    if name in _LAZY:
        import importlib

        mod, attr = _LAZY[name]
        return getattr(importlib.import_module(mod), attr)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
