"""Selects the compiled transfer kernels when available.

Set ``FRACPME_BACKEND=python`` to force the numpy implementation.
"""
import os

from . import _kernels_py

BACKEND = "python"
deposit_bump = _kernels_py.deposit_bump
gather_linear = _kernels_py.gather_linear

if os.environ.get("FRACPME_BACKEND", "").lower() != "python":
    try:
        from . import _core
    except ImportError:  # extension not built
        pass
    else:
        deposit_bump = _core.deposit_bump
        gather_linear = _core.gather_linear
        BACKEND = "compiled"
