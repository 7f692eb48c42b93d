"""Kernel backend selection.

The compiled extension is used when importable; set ``RIGREFINE_PURE_PYTHON=1``
to force the numpy fallback.
"""

import os

from . import _pykernels as python_backend

compiled_backend = None
if os.environ.get("RIGREFINE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

kernels = compiled_backend if compiled_backend is not None else python_backend
BACKEND = kernels.BACKEND

__all__ = ["kernels", "BACKEND", "python_backend", "compiled_backend"]
