# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled MaxSim kernels: BLAS GEMM for the dot-product panels plus tight
C loops for the masked max-reduction. Float and double specializations come
from one fused-type source. Semantics (incl. the first-max tie rule) match
the numpy backend exactly; parity is enforced by tests.
"""

import numpy as np

from scipy.linalg.cython_blas cimport dgemm, sgemm

ctypedef fused real:
    float
    double

ctypedef unsigned char u8


cdef inline void _gemm_rowmajor_abt(real* a, real* b, real* out,
                                    int rows_a, int rows_b, int dim) noexcept:
    """out (rows_a x rows_b, row-major) = A (rows_a x dim) @ B (rows_b x dim)^T.

    Column-major BLAS sees a row-major M(r, c) buffer as M^T, so the call
    computes out^T = B @ A^T with the operand roles swapped.
    """
    cdef char trans_t = b'T'
    cdef char trans_n = b'N'
    cdef real one = 1
    cdef real zero = 0
    if real is float:
        sgemm(&trans_t, &trans_n, &rows_b, &rows_a, &dim,
              &one, b, &dim, a, &dim, &zero, out, &rows_b)
    else:
        dgemm(&trans_t, &trans_n, &rows_b, &rows_a, &dim,
              &one, b, &dim, a, &dim, &zero, out, &rows_b)


def maxsim_pairs(real[:, :, ::1] x, u8[:, ::1] x_mask,
                 real[:, :, ::1] y, u8[:, ::1] y_mask):
    """Row-aligned scores: out[a] = maxsim(x[a], y[a]). Returns (scores, argmax)."""
    cdef Py_ssize_t num = x.shape[0]
    cdef Py_ssize_t len_x = x.shape[1]
    cdef Py_ssize_t len_y = y.shape[1]
    cdef int dim = <int> x.shape[2]

    dtype = np.float32 if real is float else np.float64
    scores_arr = np.zeros(num, dtype=dtype)
    argmax_arr = np.empty((num, len_x), dtype=np.intc)
    sim_arr = np.empty((len_x, len_y), dtype=dtype)

    cdef real[::1] scores = scores_arr
    cdef int[:, ::1] argmax = argmax_arr
    cdef real[:, ::1] sim = sim_arr

    cdef Py_ssize_t a, i, j, best_j
    cdef real best, v, total
    for a in range(num):
        _gemm_rowmajor_abt(&x[a, 0, 0], &y[a, 0, 0], &sim[0, 0],
                           <int> len_x, <int> len_y, dim)
        total = 0
        for i in range(len_x):
            if x_mask[a, i] == 0:
                argmax[a, i] = -1
                continue
            best = 0
            best_j = -1
            for j in range(len_y):
                if y_mask[a, j] == 0:
                    continue
                v = sim[i, j]
                if best_j < 0 or v > best:
                    best = v
                    best_j = j
            argmax[a, i] = <int> best_j
            total += best
        scores[a] = total
    return scores_arr, argmax_arr


def maxsim_pairs_backward(real[::1] grad_out, int[:, ::1] argmax,
                          real[:, :, ::1] x, real[:, :, ::1] y):
    cdef Py_ssize_t num = x.shape[0]
    cdef Py_ssize_t len_x = x.shape[1]
    cdef Py_ssize_t dim = x.shape[2]

    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((num, len_x, dim), dtype=dtype)
    dy_arr = np.zeros((num, y.shape[1], dim), dtype=dtype)
    cdef real[:, :, ::1] dx = dx_arr
    cdef real[:, :, ::1] dy = dy_arr

    cdef Py_ssize_t a, i, c
    cdef int j
    cdef real g
    for a in range(num):
        g = grad_out[a]
        for i in range(len_x):
            j = argmax[a, i]
            if j < 0:
                continue
            for c in range(dim):
                dx[a, i, c] += g * y[a, j, c]
                dy[a, j, c] += g * x[a, i, c]
    return dx_arr, dy_arr


def maxsim_matrix(real[:, :, ::1] x, u8[:, ::1] x_mask,
                  real[:, :, ::1] y, u8[:, ::1] y_mask):
    """All-pairs scores: out[a, b] = maxsim(x[a], y[b]). Returns (scores, argmax)."""
    cdef Py_ssize_t num_x = x.shape[0]
    cdef Py_ssize_t num_y = y.shape[0]
    cdef Py_ssize_t len_x = x.shape[1]
    cdef Py_ssize_t len_y = y.shape[1]
    cdef int dim = <int> x.shape[2]
    cdef Py_ssize_t flat = num_y * len_y

    dtype = np.float32 if real is float else np.float64
    scores_arr = np.empty((num_x, num_y), dtype=dtype)
    argmax_arr = np.empty((num_x, num_y, len_x), dtype=np.intc)
    sim_arr = np.empty((len_x, flat), dtype=dtype)

    cdef real[:, ::1] scores = scores_arr
    cdef int[:, :, ::1] argmax = argmax_arr
    cdef real[:, ::1] sim = sim_arr

    cdef Py_ssize_t a, b, i, j, best_j, off
    cdef real best, v, total
    for a in range(num_x):
        # one GEMM against every candidate token at once: (len_x, num_y*len_y)
        _gemm_rowmajor_abt(&x[a, 0, 0], &y[0, 0, 0], &sim[0, 0],
                           <int> len_x, <int> flat, dim)
        for b in range(num_y):
            off = b * len_y
            total = 0
            for i in range(len_x):
                if x_mask[a, i] == 0:
                    argmax[a, b, i] = -1
                    continue
                best = 0
                best_j = -1
                for j in range(len_y):
                    if y_mask[b, j] == 0:
                        continue
                    v = sim[i, off + j]
                    if best_j < 0 or v > best:
                        best = v
                        best_j = j
                argmax[a, b, i] = <int> best_j
                total += best
            scores[a, b] = total
    return scores_arr, argmax_arr


def maxsim_matrix_backward(real[:, ::1] grad_out, int[:, :, ::1] argmax,
                           real[:, :, ::1] x, real[:, :, ::1] y):
    cdef Py_ssize_t num_x = x.shape[0]
    cdef Py_ssize_t num_y = y.shape[0]
    cdef Py_ssize_t len_x = x.shape[1]
    cdef Py_ssize_t dim = x.shape[2]

    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((num_x, len_x, dim), dtype=dtype)
    dy_arr = np.zeros((num_y, y.shape[1], dim), dtype=dtype)
    cdef real[:, :, ::1] dx = dx_arr
    cdef real[:, :, ::1] dy = dy_arr

    cdef Py_ssize_t a, b, i, c
    cdef int j
    cdef real g
    for a in range(num_x):
        for b in range(num_y):
            g = grad_out[a, b]
            if g == 0:
                continue
            for i in range(len_x):
                j = argmax[a, b, i]
                if j < 0:
                    continue
                for c in range(dim):
                    dx[a, i, c] += g * y[b, j, c]
                    dy[b, j, c] += g * x[a, i, c]
    return dx_arr, dy_arr
