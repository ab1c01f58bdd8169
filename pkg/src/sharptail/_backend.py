"""Selection between the compiled kernels and the pure-Python fallback.

The compiled extension ``sharptail._kernels`` is used when it imports and the
environment variable ``SHARPTAIL_PURE_PYTHON`` is not set to a true value.
"""
from __future__ import annotations

import contextlib
import os

try:  # pragma: no cover - depends on build
    from . import _kernels as _native_module
    IMPORT_ERROR = None
except ImportError as exc:  # pragma: no cover
    _native_module = None
    IMPORT_ERROR = exc

_forced_python = os.environ.get("SHARPTAIL_PURE_PYTHON", "").lower() in ("1", "true", "yes")


def native():
    """The compiled kernel module, or ``None`` if the fallback is active."""
    return None if _forced_python else _native_module


def available() -> bool:
    return _native_module is not None


def name() -> str:
    return "native" if native() is not None else "python"


@contextlib.contextmanager
def force_python(flag: bool = True):
    """Temporarily select the pure-Python implementation."""
    global _forced_python
    old = _forced_python
    _forced_python = bool(flag)
    try:
        yield
    finally:
        _forced_python = old
