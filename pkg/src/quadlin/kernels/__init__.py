"""Penalty-kernel backend selection.

The compiled Cython kernel is preferred when it imported cleanly; the
numpy implementation is the fallback and the semantic reference. Set
QUADLIN_FORCE_NUMPY=1 to force the fallback (used by tests/benchmarks).
"""

import os

from . import numpy_backend

BACKEND = "numpy"
accumulate_penalties = numpy_backend.accumulate_penalties

if os.environ.get("QUADLIN_FORCE_NUMPY") != "1":
    try:
        from ._core import accumulate_penalties  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass


def get_backend(name):
    """Return the accumulate_penalties callable for an explicit backend name."""
    if name == "numpy":
        return numpy_backend.accumulate_penalties
    if name == "cython":
        from ._core import accumulate_penalties as compiled
        return compiled
    raise ValueError(f"unknown kernel backend {name!r}")
