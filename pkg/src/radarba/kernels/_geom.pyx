# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-correspondence kernel; mirrors numpy_backend.geometric_blocks."""

from libc.math cimport sqrt

import numpy as np


def geometric_blocks(
    double[:, ::1] body_j,
    double[:, ::1] body_k,
    double[:, ::1] var_j,
    double[:, ::1] var_k,
    long[::1] idx_j,
    long[::1] idx_k,
    double[:, :, ::1] R,
    double[:, ::1] t,
    double[:, :, ::1] R_cov,
    bint with_jacobians=True,
    double huber_delta=0.0,
):
    cdef Py_ssize_t n = body_j.shape[0]
    r_w_arr = np.zeros((n, 3))
    cdef double[:, ::1] r_w = r_w_arr
    cdef double[:, :, ::1] Jj
    cdef double[:, :, ::1] Jk
    if with_jacobians:
        Jj_arr = np.zeros((n, 3, 6))
        Jk_arr = np.zeros((n, 3, 6))
        Jj = Jj_arr
        Jk = Jk_arr
    else:
        Jj_arr = None
        Jk_arr = None

    cdef double cost = 0.0
    cdef Py_ssize_t i, a, b, c, col
    cdef double pj[3]
    cdef double pk[3]
    cdef double rj[3]
    cdef double rk[3]
    cdef double r[3]
    cdef double S[3][3]
    cdef double L[3][3]
    cdef double Jrow[3][12]
    cdef double y[3]
    cdef double sq, s, w, d

    for i in range(n):
        a = idx_j[i]
        b = idx_k[i]

        for c in range(3):
            rj[c] = R[a, c, 0] * body_j[i, 0] + R[a, c, 1] * body_j[i, 1] + R[a, c, 2] * body_j[i, 2]
            rk[c] = R[b, c, 0] * body_k[i, 0] + R[b, c, 1] * body_k[i, 1] + R[b, c, 2] * body_k[i, 2]
        for c in range(3):
            pj[c] = rj[c] + t[a, c]
            pk[c] = rk[c] + t[b, c]
            r[c] = pj[c] - pk[c]

        # S = Cj diag(vj) Cj^T + Ck diag(vk) Ck^T (symmetric, build lower part)
        for c in range(3):
            for col in range(c + 1):
                S[c][col] = (
                    R_cov[a, c, 0] * var_j[i, 0] * R_cov[a, col, 0]
                    + R_cov[a, c, 1] * var_j[i, 1] * R_cov[a, col, 1]
                    + R_cov[a, c, 2] * var_j[i, 2] * R_cov[a, col, 2]
                    + R_cov[b, c, 0] * var_k[i, 0] * R_cov[b, col, 0]
                    + R_cov[b, c, 1] * var_k[i, 1] * R_cov[b, col, 1]
                    + R_cov[b, c, 2] * var_k[i, 2] * R_cov[b, col, 2]
                )

        # Cholesky of 3x3 SPD
        L[0][0] = sqrt(S[0][0])
        L[1][0] = S[1][0] / L[0][0]
        L[1][1] = sqrt(S[1][1] - L[1][0] * L[1][0])
        L[2][0] = S[2][0] / L[0][0]
        L[2][1] = (S[2][1] - L[2][0] * L[1][0]) / L[1][1]
        L[2][2] = sqrt(S[2][2] - L[2][0] * L[2][0] - L[2][1] * L[2][1])

        y[0] = r[0] / L[0][0]
        y[1] = (r[1] - L[1][0] * y[0]) / L[1][1]
        y[2] = (r[2] - L[2][0] * y[0] - L[2][1] * y[1]) / L[2][2]
        sq = y[0] * y[0] + y[1] * y[1] + y[2] * y[2]

        w = 1.0
        if huber_delta > 0.0:
            s = sqrt(sq)
            if s > huber_delta:
                cost += 2.0 * huber_delta * s - huber_delta * huber_delta
                w = sqrt(huber_delta / s)
            else:
                cost += sq
        else:
            cost += sq

        r_w[i, 0] = y[0] * w
        r_w[i, 1] = y[1] * w
        r_w[i, 2] = y[2] * w

        if with_jacobians:
            for c in range(3):
                for col in range(12):
                    Jrow[c][col] = 0.0
            # [-skew(rj) | I] for j, [skew(rk) | -I] for k
            Jrow[0][1] = rj[2]
            Jrow[0][2] = -rj[1]
            Jrow[1][0] = -rj[2]
            Jrow[1][2] = rj[0]
            Jrow[2][0] = rj[1]
            Jrow[2][1] = -rj[0]
            Jrow[0][3] = 1.0
            Jrow[1][4] = 1.0
            Jrow[2][5] = 1.0
            Jrow[0][7] = -rk[2]
            Jrow[0][8] = rk[1]
            Jrow[1][6] = rk[2]
            Jrow[1][8] = -rk[0]
            Jrow[2][6] = -rk[1]
            Jrow[2][7] = rk[0]
            Jrow[0][9] = -1.0
            Jrow[1][10] = -1.0
            Jrow[2][11] = -1.0
            for col in range(12):
                y[0] = Jrow[0][col] / L[0][0]
                y[1] = (Jrow[1][col] - L[1][0] * y[0]) / L[1][1]
                y[2] = (Jrow[2][col] - L[2][0] * y[0] - L[2][1] * y[1]) / L[2][2]
                if col < 6:
                    Jj[i, 0, col] = y[0] * w
                    Jj[i, 1, col] = y[1] * w
                    Jj[i, 2, col] = y[2] * w
                else:
                    Jk[i, 0, col - 6] = y[0] * w
                    Jk[i, 1, col - 6] = y[1] * w
                    Jk[i, 2, col - 6] = y[2] * w

    return cost, r_w_arr, Jj_arr, Jk_arr
