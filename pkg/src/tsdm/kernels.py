"""Kernel backend selection.

The compiled Cython module is used when it was built; otherwise the numpy
implementation is used. ``TSDM_KERNELS=python`` forces the fallback.
"""

import importlib
import os

from . import _kernels_py

_FUNCS = (
    "im2col",
    "col2im",
    "conv1d_forward",
    "conv1d_backward",
    "group_norm_forward",
    "group_norm_backward",
)
# numpy's vectorized exp outruns a scalar C loop; SiLU stays on numpy everywhere
silu_forward = _kernels_py.silu_forward
silu_backward = _kernels_py.silu_backward


def load_backend(name: str):
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        return importlib.import_module("tsdm._ckernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends() -> list[str]:
    names = ["python"]
    try:
        load_backend("cython")
        names.insert(0, "cython")
    except ImportError:
        pass
    return names


def _select():
    if os.environ.get("TSDM_KERNELS", "").lower() == "python":
        return "python", _kernels_py
    try:
        return "cython", load_backend("cython")
    except ImportError:
        return "python", _kernels_py


BACKEND, _impl = _select()


def use_backend(name: str) -> None:
    """Switch the active kernels process-wide (benchmarks and tests)."""
    global BACKEND, _impl
    _impl = load_backend(name)
    BACKEND = name
    _bind()


def _bind():
    g = globals()
    for f in _FUNCS:
        g[f] = getattr(_impl, f)


_bind()
