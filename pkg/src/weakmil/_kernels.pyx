# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
# distutils: language = c++
"""Compiled versions of the kernels in ``_kernels_py``."""
import numpy as np

from libc.stdlib cimport malloc, free
from libcpp.algorithm cimport sort


def sparsemax_rows(z):
    cdef double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef Py_ssize_t n_rows = zv.shape[0], n = zv.shape[1]
    out = np.empty((n_rows, n), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef double* buf = <double*>malloc(n * sizeof(double))
    cdef Py_ssize_t r, i, k
    cdef double acc, cs_k, tau, v
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for r in range(n_rows):
                # sort the negated row ascending: exact, and equal keys sum alike
                for i in range(n):
                    buf[i] = -zv[r, i]
                sort(buf, buf + n)
                acc = 0.0
                k = 1
                cs_k = -buf[0]
                for i in range(n):
                    acc = acc - buf[i]
                    if 1.0 - (i + 1) * buf[i] > acc:
                        k = i + 1
                        cs_k = acc
                tau = (cs_k - 1.0) / k
                for i in range(n):
                    v = zv[r, i] - tau
                    ov[r, i] = v if v > 0.0 else 0.0
    finally:
        free(buf)
    return out


def sparsemax_rows_vjp(p, u):
    cdef double[:, ::1] pv = np.ascontiguousarray(p, dtype=np.float64)
    cdef double[:, ::1] uv = np.ascontiguousarray(u, dtype=np.float64)
    cdef Py_ssize_t n_rows = pv.shape[0], n = pv.shape[1]
    out = np.zeros((n_rows, n), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t r, i, size
    cdef double total, mean
    cdef bint empty = False
    with nogil:
        for r in range(n_rows):
            total = 0.0
            size = 0
            for i in range(n):
                if pv[r, i] > 0.0:
                    total = total + uv[r, i]
                    size = size + 1
            if size == 0:
                empty = True
                break
            mean = total / size
            for i in range(n):
                if pv[r, i] > 0.0:
                    ov[r, i] = uv[r, i] - mean
    if empty:
        raise RuntimeError("sparsemax output with empty support")
    return out


def greedy_match(ious, thresholds):
    cdef double[:, ::1] iv = np.ascontiguousarray(ious, dtype=np.float64)
    cdef double[::1] tv = np.ascontiguousarray(thresholds, dtype=np.float64)
    cdef Py_ssize_t n_det = iv.shape[0], n_gt = iv.shape[1], n_t = tv.shape[0]
    out = np.full((n_t, n_det), -1, dtype=np.int64)
    cdef long long[:, ::1] ov = out
    taken_arr = np.zeros(n_gt, dtype=np.uint8)
    cdef unsigned char[::1] taken = taken_arr
    cdef Py_ssize_t ti, d, g, best
    cdef double t, v, best_iou
    with nogil:
        for ti in range(n_t):
            t = tv[ti]
            for g in range(n_gt):
                taken[g] = 0
            for d in range(n_det):
                best = -1
                best_iou = 0.0
                for g in range(n_gt):
                    if taken[g]:
                        continue
                    v = iv[d, g]
                    if v >= t and (best < 0 or v > best_iou):
                        best = g
                        best_iou = v
                if best >= 0:
                    taken[best] = 1
                    ov[ti, d] = best
    return out
