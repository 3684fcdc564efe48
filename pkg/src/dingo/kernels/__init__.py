"""Krylov kernel backends.

The compiled extension ``_ckernels`` is used when it was built; otherwise
the numpy implementation in ``_pykernels`` is imported. Setting the
environment variable ``DINGO_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _pykernels

_force_python = os.environ.get("DINGO_PURE_PYTHON", "") not in ("", "0")

backend = _pykernels
if not _force_python:
    try:
        from . import _ckernels as backend
    except ImportError:
        backend = _pykernels

BACKEND = backend.BACKEND
TOLERANCE_MET = _pykernels.TOLERANCE_MET
CAP_REACHED = _pykernels.CAP_REACHED
BREAKDOWN = _pykernels.BREAKDOWN


def available_backends():
    """Names of the importable backends, fallback first."""
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        pass
    else:
        names.append("cython")
    return names


def get_backend(name=None):
    """Return the kernel module for ``name`` ("python", "cython" or None for the active one)."""
    if name is None:
        return backend
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels
        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")
