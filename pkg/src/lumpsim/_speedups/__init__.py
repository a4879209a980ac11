"""Kernel backend selection: compiled extension with pure-Python fallback.

Set LUMPSIM_FORCE_PY=1 to force the numpy reference kernels even when the
compiled extension is importable.
"""

import os

from . import _core_py

def _load():
    if os.environ.get("LUMPSIM_FORCE_PY"):
        return _core_py
    try:
        from . import _core
    except ImportError:
        return _core_py
    if not hasattr(_core, "engine_simulate"):
        return _core_py
    return _core


kernel = _load()

BACKEND = kernel.BACKEND_NAME
