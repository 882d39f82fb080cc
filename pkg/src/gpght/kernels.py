"""Backend selection for the hot row-wise kernels.

The compiled extension is preferred; set ``GPGHT_PURE_PYTHON=1`` to force the
numpy fallback (used by the benchmark and the cross-backend tests).
"""
import os

from . import _kernels_py

if os.environ.get("GPGHT_PURE_PYTHON") == "1":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "cython" if _impl is not _kernels_py else "python"

softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd


def use_backend(name):
    """Switch kernels at runtime ("cython" or "python"); returns the previous name."""
    global _impl, BACKEND, softmax_fwd, softmax_bwd, layernorm_fwd, layernorm_bwd
    previous = BACKEND
    if name == "python":
        _impl = _kernels_py
    elif name == "cython":
        from . import _kernels as _impl  # noqa: F811
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name
    softmax_fwd = _impl.softmax_fwd
    softmax_bwd = _impl.softmax_bwd
    layernorm_fwd = _impl.layernorm_fwd
    layernorm_bwd = _impl.layernorm_bwd
    return previous
