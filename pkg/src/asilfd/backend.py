"""Kernel backend selection.

The compiled core (``asilfd._core``) is used when it imports; otherwise the
NumPy twin in ``asilfd._pycore``. ``ASILFD_BACKEND=python`` forces the
fallback, ``ASILFD_BACKEND=compiled`` makes a missing extension an error.
"""
from __future__ import annotations

import os
from types import ModuleType

from asilfd import _pycore


def _load(choice: str) -> tuple[ModuleType, str]:
    if choice == "python":
        return _pycore, "python"
    try:
        from asilfd import _core
    except ImportError:
        if choice == "compiled":
            raise
        return _pycore, "python"
    return _core, "compiled"


def get_kernels(name: str) -> ModuleType:
    """Return the kernel module for ``name`` ('compiled' or 'python')."""
    return _load(name)[0]


def compiled_available() -> bool:
    try:
        from asilfd import _core  # noqa: F401
    except ImportError:
        return False
    return True


kernels, BACKEND = _load(os.environ.get("ASILFD_BACKEND", "auto").lower())
