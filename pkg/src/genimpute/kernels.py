"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback
is used. Set ``GENIMPUTE_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py as python_backend

compiled_backend = None
if os.environ.get("GENIMPUTE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "compiled" if compiled_backend is not None else "python"

fnv1a_rows = _active.fnv1a_rows
uniform_rows = _active.uniform_rows
adam_update = _active.adam_update
bn_forward_train = _active.bn_forward_train
bn_backward = _active.bn_backward

__all__ = [
    "BACKEND",
    "fnv1a_rows",
    "uniform_rows",
    "adam_update",
    "bn_forward_train",
    "bn_backward",
    "compiled_backend",
    "python_backend",
]
