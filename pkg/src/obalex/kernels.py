"""Kernel backend selection.

The compiled core (``obalex._ckernels``) is used when it was built; otherwise
the numpy implementation in ``obalex._pykernels`` is loaded. Setting
``OBALEX_PURE_PYTHON=1`` forces the fallback.
"""
import os

if os.environ.get("OBALEX_PURE_PYTHON", "") not in ("", "0"):
    from . import _pykernels as _impl
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "compiled"
    except ImportError:
        from . import _pykernels as _impl
        BACKEND = "python"

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
maxpool_forward = _impl.maxpool_forward
maxpool_backward = _impl.maxpool_backward
dense_forward = _impl.dense_forward
dense_backward = _impl.dense_backward

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool_forward",
    "maxpool_backward",
    "dense_forward",
    "dense_backward",
]
