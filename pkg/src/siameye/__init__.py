"""Siamese-network eye-center detector for NIR partial face images.

Submodules are loaded lazily so the command-line entry point can pin BLAS
thread counts before numpy is imported.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "ops",
    "backbone",
    "container",
    "head",
    "losses",
    "synth",
    "pgm",
    "train",
    "metrics",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
