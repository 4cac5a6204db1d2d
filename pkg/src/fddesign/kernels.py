"""Backend selection for the design kernels.

The compiled extension is used when it imports; otherwise, or when the
environment variable ``FD_PURE_PYTHON=1`` is set, the numpy implementation
is used. ``BACKEND`` names the active one.
"""
import os

from . import _kernels_py as python_backend

compiled_backend = None
if os.environ.get("FD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

closed_form = _active.closed_form
totals = _active.totals
cond_norm_mean = _active.cond_norm_mean
