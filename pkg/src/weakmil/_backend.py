"""Kernel backend selection.

The compiled ``weakmil._kernels`` extension is used when it imports; setting
``WEAKMIL_PURE_PYTHON=1`` forces the NumPy fallback.
"""
import os

from . import _kernels_py

kernels = _kernels_py
NAME = "python"

if os.environ.get("WEAKMIL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        kernels = _compiled
        NAME = "cython"


def worker_count():
    """Worker cap from ``WEAKMIL_THREADS`` (default: every available core)."""
    raw = os.environ.get("WEAKMIL_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1
