"""Kernel backend selection.

numba kernels are used when numba imports cleanly, unless the environment
variable ``LPCI_DISABLE_NUMBA`` is set to ``1``/``true``/``yes``, in which
case the pure-numpy kernels are used. Both build identical forests.
"""

from __future__ import annotations

import os
from types import ModuleType

from lpci.forest import _numpy_kernels

_DISABLED = os.environ.get("LPCI_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    if _DISABLED:
        raise ImportError("numba disabled by LPCI_DISABLE_NUMBA")
    from lpci.forest import _numba_kernels
except ImportError:  # pragma: no cover - depends on environment
    _numba_kernels = None

BACKEND = "numba" if _numba_kernels is not None else "numpy"


def get_kernels(name: str | None = None) -> ModuleType:
    name = name or BACKEND
    if name == "numpy":
        return _numpy_kernels
    if name == "numba":
        if _numba_kernels is None:
            raise RuntimeError("numba backend is unavailable or disabled")
        return _numba_kernels
    raise ValueError(f"unknown backend {name!r}")
