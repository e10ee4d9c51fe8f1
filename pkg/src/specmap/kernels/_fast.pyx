# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled conv patch kernels (see pure.py for the reference semantics)."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def im2col(cnp.ndarray[cnp.float64_t, ndim=4] xpad, int kh, int kw, int sh, int sw,
           int oh, int ow, cnp.ndarray[cnp.float64_t, ndim=2] out_arr):
    cdef Py_ssize_t b = xpad.shape[0]
    cdef Py_ssize_t c = xpad.shape[1]
    cdef Py_ssize_t hp = xpad.shape[2]
    cdef Py_ssize_t wp = xpad.shape[3]
    cdef double[:, ::1] out = out_arr
    cdef const double[:, :, :, ::1] x = xpad
    cdef const double* xp = &x[0, 0, 0, 0]
    cdef double* op
    cdef Py_ssize_t ci, ki, kj, bi, i, j, src, row_src
    for ci in range(c):
        for ki in range(kh):
            for kj in range(kw):
                op = &out[(ci * kh + ki) * kw + kj, 0]
                for bi in range(b):
                    for i in range(oh):
                        row_src = ((bi * c + ci) * hp + i * sh + ki) * wp + kj
                        if sw == 1:
                            for j in range(ow):
                                op[0] = xp[row_src + j]
                                op += 1
                        else:
                            src = row_src
                            for j in range(ow):
                                op[0] = xp[src]
                                op += 1
                                src += sw
    return out_arr


def col2im_add(cnp.ndarray[cnp.float64_t, ndim=2] cols, int b, int c, int hp, int wp,
               int kh, int kw, int sh, int sw, int oh, int ow):
    grad_arr = np.zeros((b, c, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] grad = grad_arr
    cdef const double[:, ::1] cl = cols
    cdef double* gp = &grad[0, 0, 0, 0]
    cdef const double* cp
    cdef Py_ssize_t ci, ki, kj, bi, i, j, dst, row_dst
    # tap-outer ordering keeps the accumulation order identical to pure.col2im_add
    for ki in range(kh):
        for kj in range(kw):
            for ci in range(c):
                cp = &cl[(ci * kh + ki) * kw + kj, 0]
                for bi in range(b):
                    for i in range(oh):
                        row_dst = ((bi * c + ci) * hp + i * sh + ki) * wp + kj
                        if sw == 1:
                            for j in range(ow):
                                gp[row_dst + j] += cp[0]
                                cp += 1
                        else:
                            dst = row_dst
                            for j in range(ow):
                                gp[dst] += cp[0]
                                cp += 1
                                dst += sw
    return grad_arr
