"""Backend selection for the convolution kernels.

The compiled core is used when it imports; ``COLGEO_BACKEND=python`` forces
the numpy fallback.
"""
import os

import numpy as np

from colgeo import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("COLGEO_BACKEND", "").lower() != "python":
    try:
        from colgeo import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels


def im2col(xp, kh, kw, stride, dilation, out_h, out_w):
    return _impl.im2col(np.ascontiguousarray(xp), kh, kw, stride, dilation, out_h, out_w)


def col2im(cols, padded_shape, stride, dilation):
    return _impl.col2im(np.ascontiguousarray(cols), tuple(padded_shape), stride, dilation)


def set_threads(n: int | None = None) -> None:
    """Cap BLAS threads; ``n`` defaults to ``COLGEO_THREADS`` (0 = library default)."""
    if n is None:
        n = int(os.environ.get("COLGEO_THREADS", "0") or 0)
    if n > 0:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
