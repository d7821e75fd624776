"""Kernel backend selection.

`ZOBRIDGE_BACKEND` picks the implementation at import time:

* ``auto`` (default) — numba-jitted kernels, falling back to numpy if numba
  is unavailable;
* ``numba`` — require the jitted kernels;
* ``numpy`` — force the pure-numpy fallback.

`use_backend()` switches at runtime (tests, benchmarks). Results are
bit-reproducible within a backend; across backends they agree to roundoff.
"""

from __future__ import annotations

import os

_BACKENDS = ("numba", "numpy")

_active = None
_active_name = ""


def _load(name: str):
    if name == "numpy":
        from . import _kernels_np
        return _kernels_np
    from . import _kernels_nb
    return _kernels_nb


def use_backend(name: str) -> None:
    global _active, _active_name
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; expected one of {_BACKENDS}")
    _active = _load(name)
    _active_name = name


def active_backend() -> str:
    return _active_name


def _init_from_env() -> None:
    choice = os.environ.get("ZOBRIDGE_BACKEND", "auto").lower()
    if choice == "numpy":
        use_backend("numpy")
    elif choice == "numba":
        use_backend("numba")
    elif choice == "auto":
        try:
            use_backend("numba")
        except ImportError:
            use_backend("numpy")
    else:
        raise ValueError(
            f"ZOBRIDGE_BACKEND={choice!r} not understood; use auto, numba or numpy")


def matvec(a, x):
    return _active.matvec(a, x)


def mat_t_vec(a, g):
    return _active.mat_t_vec(a, g)


def dot(a, b):
    return _active.dot(a, b)


def axpy(alpha, x, y):
    return _active.axpy(alpha, x, y)


def mlp_forward(widths, acts, params, x):
    return _active.mlp_forward(widths, acts, params, x)


def mlp_vjp(widths, acts, params, x, g):
    return _active.mlp_vjp(widths, acts, params, x, g)


def threshold_bits(x, thr):
    return _active.threshold_bits(x, thr)


def bit_features(bits):
    return _active.bit_features(bits)


_init_from_env()
