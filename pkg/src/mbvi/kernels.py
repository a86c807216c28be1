"""Backend selection for the moment sweeps.

The compiled extension ``mbvi._kernels`` is used when it imports;
otherwise, or when ``MBVI_PURE_PYTHON=1`` is set, the numpy reference
in :mod:`mbvi._sweeps` runs instead. Both expose the same functions.
"""

from __future__ import annotations

import os

from . import _sweeps as python_backend

compiled_backend = None
if os.environ.get("MBVI_PURE_PYTHON", "").strip().lower() not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled_backend  # type: ignore[no-redef]
    except ImportError:  # extension not built
        compiled_backend = None

BACKEND = "compiled" if compiled_backend is not None else "python"

_BACKENDS = {"python": python_backend}
if compiled_backend is not None:
    _BACKENDS["compiled"] = compiled_backend


def available():
    return tuple(_BACKENDS)


def get(name=None):
    """Module implementing the sweeps; ``None`` picks the default."""
    name = BACKEND if name is None else name
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} unavailable (have {available()})") from None


def forward_sweep(basis, A, phi0, dt, clamp=True, backend=None):
    return get(backend).forward_sweep(basis, A, phi0, dt, clamp)


def backward_sweep(basis, A, l, phi, stages, dt, jumps, backend=None):
    return get(backend).backward_sweep(basis, A, l, phi, stages, dt, jumps)


def continuous_backward_sweep(basis, A, l, phi, dt, jumps):
    return python_backend.continuous_backward_sweep(basis, A, l, phi, dt, jumps)
