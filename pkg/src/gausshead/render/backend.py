"""Rasterizer kernel selection.

The compiled kernel is preferred; set ``GAUSSHEAD_BACKEND=python`` to force
the numpy implementation.
"""
from __future__ import annotations

import os

from . import _raster_py

try:
    from . import _raster as _compiled
except ImportError:  # extension not built
    _compiled = None

_active = _compiled if (_compiled is not None and os.environ.get("GAUSSHEAD_BACKEND") != "python") else _raster_py


def kernel():
    return _active


def name() -> str:
    return "compiled" if _active is _compiled and _compiled is not None else "python"


def available() -> list[str]:
    return ["python"] + (["compiled"] if _compiled is not None else [])


def use(which: str) -> None:
    """Switch kernels at runtime (benchmarks and cross-backend tests)."""
    global _active
    if which == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled rasterizer is not built")
        _active = _compiled
    elif which == "python":
        _active = _raster_py
    else:
        raise ValueError(f"unknown backend {which!r}")
