"""NumPy fallback for the conv patch kernels.

Patch matrices use a (C*Kh*Kw, B*oh*ow) layout: each kernel tap owns a
contiguous row, so gathering is a handful of strided block copies and the
conv GEMM consumes the matrix without further reshuffling.

Both backends must produce bitwise-identical arrays: the compiled versions
in ``_fast.pyx`` accumulate in the same (tap-outer) order used here, so the
floating-point addition order in ``col2im_add`` matches.
"""

import numpy as np


def im2col(xpad, kh, kw, sh, sw, oh, ow, out):
    """Gather conv patches of a padded NCHW batch into (C*kh*kw, B*oh*ow)."""
    b, c, _, _ = xpad.shape
    view = out.reshape(c, kh, kw, b, oh, ow)
    for ki in range(kh):
        for kj in range(kw):
            src = xpad[:, :, ki : ki + sh * oh : sh, kj : kj + sw * ow : sw]
            view[:, ki, kj] = src.transpose(1, 0, 2, 3)
    return out


def col2im_add(cols, b, c, hp, wp, kh, kw, sh, sw, oh, ow):
    """Scatter-add patch rows back onto a zeroed (b, c, hp, wp) padded gradient."""
    grad = np.zeros((b, c, hp, wp), dtype=np.float64)
    view = cols.reshape(c, kh, kw, b, oh, ow)
    for ki in range(kh):
        for kj in range(kw):
            grad[:, :, ki : ki + sh * oh : sh, kj : kj + sw * ow : sw] += \
                view[:, ki, kj].transpose(1, 0, 2, 3)
    return grad
