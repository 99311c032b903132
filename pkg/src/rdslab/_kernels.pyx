# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: QR sweeps along a Jacobian stack, nearest-leaf assignment."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, log, fabs

cnp.import_array()


def qr_sweep(double[:, :, ::1] jacs, double[:, ::1] Q0, bint record=False):
    """Push the frame Q0 through jacs[0], jacs[1], ... with Gram-Schmidt after every step.

    Returns (log|R_ii| per step, final frame, recorded frames or None).
    """
    cdef Py_ssize_t n = jacs.shape[0], d = jacs.shape[1], k = Q0.shape[1]
    cdef Py_ssize_t t, i, j, c, p, rep
    cdef double s, nrm
    logs_a = np.empty((n, k))
    cdef double[:, ::1] logs = logs_a
    Q_a = np.array(Q0, dtype=np.float64, order="C")
    cdef double[:, ::1] Q = Q_a
    W_a = np.empty((d, k))
    cdef double[:, ::1] W = W_a
    frames_a = np.empty((n + 1 if record else 1, d, k))
    cdef double[:, :, ::1] frames = frames_a
    if record:
        frames[0, :, :] = Q
    for t in range(n):
        for i in range(d):
            for c in range(k):
                s = 0.0
                for j in range(d):
                    s += jacs[t, i, j] * Q[j, c]
                W[i, c] = s
        for c in range(k):
            for rep in range(2):
                for p in range(c):
                    s = 0.0
                    for i in range(d):
                        s += Q[i, p] * W[i, c]
                    for i in range(d):
                        W[i, c] -= s * Q[i, p]
            s = 0.0
            for i in range(d):
                s += W[i, c] * W[i, c]
            nrm = sqrt(s)
            logs[t, c] = log(nrm)
            for i in range(d):
                Q[i, c] = W[i, c] / nrm
        if record:
            frames[t + 1, :, :] = Q
    return logs_a, Q_a, (frames_a if record else None)


def nearest_leaf(double[:, :, ::1] V, long long[::1] cell, double[::1] w, double[:, ::1] B):
    """Nearest leaf for each sample.

    V[l, i, :] are the values of leaf l at grid node i; sample m sits in
    cell[m] with weight w[m] and has offset B[m, :].  Returns the leaf index
    and the Euclidean distance to the interpolated leaf value.
    """
    cdef Py_ssize_t L = V.shape[0], k = V.shape[2], M = B.shape[0]
    cdef Py_ssize_t m, l, j, i0, best
    cdef double s, diff, bestd, wm
    idx_a = np.empty(M, dtype=np.int64)
    dist_a = np.empty(M)
    cdef long long[::1] idx = idx_a
    cdef double[::1] dist = dist_a
    for m in range(M):
        i0 = cell[m]
        wm = w[m]
        best = -1
        bestd = 1e308
        for l in range(L):
            s = 0.0
            for j in range(k):
                diff = B[m, j] - ((1.0 - wm) * V[l, i0, j] + wm * V[l, i0 + 1, j])
                s += diff * diff
            if s < bestd:
                bestd = s
                best = l
        idx[m] = best
        dist[m] = sqrt(bestd)
    return idx_a, dist_a
