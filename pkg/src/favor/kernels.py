"""Kernel dispatch.

The compiled extension is used when it imports; otherwise the pure-Python
twins are used. Set ``FAVOR_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("FAVOR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels


def masked_softmax_forward(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis of a 2-D array; row i uses mask row ``i % len(mask)``."""
    return _impl.masked_softmax_forward(
        np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(mask, dtype=np.uint8)
    )


def masked_softmax_backward(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return _impl.masked_softmax_backward(
        np.ascontiguousarray(y, dtype=np.float64), np.ascontiguousarray(gy, dtype=np.float64)
    )


def edit_ops(ref, hyp) -> tuple[int, int, int]:
    if _impl is _pykernels:
        return _pykernels.edit_ops(ref, hyp)
    s, d, i = _impl.edit_ops(
        np.ascontiguousarray(ref, dtype=np.int64), np.ascontiguousarray(hyp, dtype=np.int64)
    )
    return int(s), int(d), int(i)
