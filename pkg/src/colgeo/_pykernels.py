"""Pure numpy im2col / col2im, used when the compiled core is unavailable.

Accumulation order in ``col2im`` matches the Cython version (channel, kernel
row, kernel column), so both backends produce bitwise-identical results.
"""
import numpy as np


def im2col(xp, kh, kw, stride, dilation, out_h, out_w):
    """Unfold a padded ``[N, C, Hp, Wp]`` array into ``[N, C, kh, kw, Ho, Wo]``."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=np.float64)
    h_span = stride * (out_h - 1) + 1
    w_span = stride * (out_w - 1) + 1
    for i in range(kh):
        y0 = i * dilation
        for j in range(kw):
            x0 = j * dilation
            cols[:, :, i, j] = xp[:, :, y0:y0 + h_span:stride, x0:x0 + w_span:stride]
    return cols


def col2im(cols, padded_shape, stride, dilation):
    """Adjoint of :func:`im2col`: scatter-add columns back into a padded image."""
    n, c, kh, kw, out_h, out_w = cols.shape
    xp = np.zeros(padded_shape, dtype=np.float64)
    h_span = stride * (out_h - 1) + 1
    w_span = stride * (out_w - 1) + 1
    for i in range(kh):
        y0 = i * dilation
        for j in range(kw):
            x0 = j * dilation
            xp[:, :, y0:y0 + h_span:stride, x0:x0 + w_span:stride] += cols[:, :, i, j]
    return xp
