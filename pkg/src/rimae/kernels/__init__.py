"""Geometry hot-path kernels: compiled extension with a NumPy fallback.

The backend is picked once at import time. Set ``RIMAE_KERNELS=reference`` to
force the NumPy implementation (used by the benchmark), or
``RIMAE_KERNELS=native`` to fail loudly when the extension is missing.
"""

import importlib
import os

from . import reference
from .reference import KernelError

_requested = os.environ.get("RIMAE_KERNELS", "").lower()
_impl = None
if _requested != "reference":
    try:
        _impl = importlib.import_module("._native", __name__)
    except ImportError:
        if _requested == "native":
            raise
if _impl is None:
    _impl = reference
backend_name = "reference" if _impl is reference else "native"

fps = _impl.fps
knn = _impl.knn
jacobi_eig3 = _impl.jacobi_eig3
pod_bin = _impl.pod_bin

__all__ = ["fps", "knn", "jacobi_eig3", "pod_bin", "backend_name", "KernelError"]
