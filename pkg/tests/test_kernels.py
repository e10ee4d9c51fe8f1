"""Backend parity: the compiled kernels must match the NumPy fallback bitwise."""

import numpy as np
import pytest

from specmap.kernels import pure

try:
    from specmap.kernels import _fast
except ImportError:
    _fast = None

needs_fast = pytest.mark.skipif(_fast is None, reason="compiled kernels not built")

CASES = [
    # (b, c, h_pad, w_pad, kh, kw, sh, sw, oh, ow)
    (3, 1, 13, 259, 3, 3, 2, 2, 6, 129),
    (2, 16, 8, 131, 3, 3, 1, 1, 6, 129),
    (4, 5, 7, 9, 1, 1, 1, 1, 7, 9),
    (1, 2, 5, 7, 3, 1, 2, 1, 2, 7),
]


def naive_gather(xpad, kh, kw, sh, sw, oh, ow):
    b, c = xpad.shape[0], xpad.shape[1]
    out = np.empty((c * kh * kw, b * oh * ow))
    for ci in range(c):
        for ki in range(kh):
            for kj in range(kw):
                row = (ci * kh + ki) * kw + kj
                col = 0
                for bi in range(b):
                    for i in range(oh):
                        for j in range(ow):
                            out[row, col] = xpad[bi, ci, i * sh + ki, j * sw + kj]
                            col += 1
    return out


@pytest.mark.parametrize("case", CASES[:2])
def test_pure_matches_naive_loops(case):
    b, c, hp, wp, kh, kw, sh, sw, oh, ow = case
    xpad = np.random.default_rng(0).standard_normal((b, c, hp, wp))
    out = np.empty((c * kh * kw, b * oh * ow))
    pure.im2col(xpad, kh, kw, sh, sw, oh, ow, out)
    assert np.array_equal(out, naive_gather(xpad, kh, kw, sh, sw, oh, ow))


@needs_fast
@pytest.mark.parametrize("case", CASES)
def test_im2col_backend_parity(case):
    b, c, hp, wp, kh, kw, sh, sw, oh, ow = case
    xpad = np.random.default_rng(1).standard_normal((b, c, hp, wp))
    a = np.empty((c * kh * kw, b * oh * ow))
    bb = np.empty_like(a)
    pure.im2col(xpad, kh, kw, sh, sw, oh, ow, a)
    _fast.im2col(xpad, kh, kw, sh, sw, oh, ow, bb)
    assert np.array_equal(a, bb)


@needs_fast
@pytest.mark.parametrize("case", CASES)
def test_col2im_backend_parity(case):
    b, c, hp, wp, kh, kw, sh, sw, oh, ow = case
    cols = np.random.default_rng(2).standard_normal((c * kh * kw, b * oh * ow))
    ga = pure.col2im_add(cols, b, c, hp, wp, kh, kw, sh, sw, oh, ow)
    gb = _fast.col2im_add(cols, b, c, hp, wp, kh, kw, sh, sw, oh, ow)
    assert np.array_equal(ga, gb)


def test_col2im_adjoint_of_im2col():
    """<im2col(x), c> == <x, col2im(c)> — the scatter is the exact adjoint."""
    rng = np.random.default_rng(3)
    b, c, hp, wp, kh, kw, sh, sw, oh, ow = CASES[1]
    x = rng.standard_normal((b, c, hp, wp))
    cols = np.empty((c * kh * kw, b * oh * ow))
    pure.im2col(x, kh, kw, sh, sw, oh, ow, cols)
    probe = rng.standard_normal(cols.shape)
    lhs = float((cols * probe).sum())
    back = pure.col2im_add(probe, b, c, hp, wp, kh, kw, sh, sw, oh, ow)
    rhs = float((x * back).sum())
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_scratch_arena_reuse():
    from specmap import kernels
    a = kernels.scratch("test_tag", (4, 5))
    b = kernels.scratch("test_tag", (2, 3))
    assert b.base is a.base or b.base is a  # same arena backs both views
    big = kernels.scratch("test_tag", (100, 100))
    assert big.shape == (100, 100)
