"""Conv patch kernels with a compiled fast path.

The Cython extension is optional: when it is missing (no compiler, no
in-place build) the NumPy implementation in ``pure`` is used instead. Both
produce bitwise-identical results. Set SPECMAP_PURE=1 to force the fallback,
e.g. when benchmarking.

Patch matrices and the conv GEMM outputs are views into per-tag scratch
arenas: a fresh multi-megabyte allocation per call costs more in page
faults than the arithmetic itself. Scratch views are only valid until the
next request for the same tag; conv2d consumes them immediately and copies
anything that escapes.
"""

import os

import numpy as np

from . import pure

if os.environ.get("SPECMAP_PURE", "") in ("", "0"):
    try:
        from . import _fast
    except ImportError:
        _fast = None
else:
    _fast = None

_BACKEND = "compiled" if _fast is not None else "pure"
_ARENAS: dict[str, np.ndarray] = {}


def backend_name():
    """Which kernel implementation was selected at import: 'compiled' or 'pure'."""
    return _BACKEND


def scratch(tag: str, shape) -> np.ndarray:
    """A float64 scratch view of the given shape, reused across calls."""
    n = 1
    for d in shape:
        n *= int(d)
    arena = _ARENAS.get(tag)
    if arena is None or arena.size < n:
        arena = np.empty(max(n, 1024), dtype=np.float64)
        _ARENAS[tag] = arena
    return arena[:n].reshape(shape)


def im2col(xpad, kh, kw, sh, sw, oh, ow) -> np.ndarray:
    """Conv patches of a padded NCHW batch as a (C*kh*kw, B*oh*ow) scratch view."""
    b, c = xpad.shape[0], xpad.shape[1]
    out = scratch("im2col", (c * kh * kw, b * oh * ow))
    if _fast is not None:
        _fast.im2col(xpad, kh, kw, sh, sw, oh, ow, out)
    else:
        pure.im2col(xpad, kh, kw, sh, sw, oh, ow, out)
    return out


def col2im_add(cols, b, c, hp, wp, kh, kw, sh, sw, oh, ow) -> np.ndarray:
    """Scatter-add patch rows onto a freshly allocated padded gradient."""
    if _fast is not None:
        return _fast.col2im_add(cols, b, c, hp, wp, kh, kw, sh, sw, oh, ow)
    return pure.col2im_add(cols, b, c, hp, wp, kh, kw, sh, sw, oh, ow)
