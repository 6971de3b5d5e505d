"""Kernel backend selection.

The numba backend is used when numba imports cleanly, unless the environment
variable ``CLENERGY_DISABLE_NUMBA`` is set to a truthy value, in which case
the pure-numpy implementations are used. Both expose identical functions.
"""

from __future__ import annotations

import os
from types import ModuleType

from . import _numpy as numpy_backend

ENV_FLAG = "CLENERGY_DISABLE_NUMBA"


def _numba_disabled() -> bool:
    return os.environ.get(ENV_FLAG, "").strip().lower() in {"1", "true", "yes", "on"}


def load_numba() -> ModuleType | None:
    """Import the compiled backend, or return None if numba is unavailable."""
    try:
        from . import _numba
    except ImportError:
        return None
    return _numba


def select() -> ModuleType:
    if _numba_disabled():
        return numpy_backend
    return load_numba() or numpy_backend


backend = select()
BACKEND_NAME = "numba" if backend is not numpy_backend else "numpy"

__all__ = ["backend", "BACKEND_NAME", "numpy_backend", "load_numba", "ENV_FLAG"]
