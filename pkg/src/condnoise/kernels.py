"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``CONDNOISE_KERNELS=python`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("CONDNOISE_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def available_backends():
    names = {"python": _pykernels}
    try:
        from . import _kernels

        names["cython"] = _kernels
    except ImportError:
        pass
    return names


def patch_moments(plane, size):
    return _impl.patch_moments(plane, size)


def depthwise3x3(x, w):
    return _impl.depthwise3x3(x, w)


def depthwise3x3_backward(gout, x, w):
    return _impl.depthwise3x3_backward(gout, x, w)
