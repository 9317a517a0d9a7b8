"""Weakly supervised fault localization via attention probing.

Submodules are imported lazily so the CLI can pin BLAS thread counts
before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("autodiff", "repstore", "probe", "trainer", "localize",
               "evalkit", "synth", "report", "cli", "errors")


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
