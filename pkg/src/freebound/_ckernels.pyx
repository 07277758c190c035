# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops; same signatures and semantics as ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, fabs, NAN

cnp.import_array()


def scatter_hat_stencil(double[:, :, :, ::1] coef, cnp.intp_t[::1] left, double[::1] h0, double[::1] h1,
                        cnp.intp_t[:, :, :, ::1] sidx, double[:, :, :, ::1] sw, Py_ssize_t nt, Py_ssize_t M):
    cdef Py_ssize_t C = coef.shape[0], P = coef.shape[1], T = coef.shape[2], Q = coef.shape[3]
    cdef Py_ssize_t S = sidx.shape[3]
    out_arr = np.zeros((C, P, nt, M))
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t c, p, t, q, s, j, m
    cdef double v, a0, a1
    with nogil:
        for c in range(C):
            for p in range(P):
                for t in range(T):
                    j = left[t]
                    a0 = h0[t]
                    a1 = h1[t]
                    for q in range(Q):
                        v = coef[c, p, t, q]
                        if v == 0.0:
                            continue
                        for s in range(S):
                            m = sidx[p, t, q, s]
                            out[c, p, j, m] += v * sw[p, t, q, s] * a0
                            out[c, p, j + 1, m] += v * sw[p, t, q, s] * a1
    return out_arr


def crr_layers(double K, double r, double sigma, double T, Py_ssize_t N, Py_ssize_t width):
    cdef double dt = T / N
    cdef double u = exp(sigma * sqrt(dt))
    cdef double d = 1.0 / u
    cdef double p = (exp(r * dt) - d) / (u - d)
    cdef double disc = exp(-r * dt)
    cdef Py_ssize_t top = N + width
    cdef Py_ssize_t n0 = top + 1
    V_arr = np.empty(n0)
    S_arr = np.empty(n0)
    C_arr = np.empty(n0)
    P_arr = np.empty(n0)
    bnd_arr = np.full(N + 1, np.nan)
    cdef double[::1] V = V_arr, S = S_arr, cont = C_arr, pay = P_arr, bnd = bnd_arr
    cdef Py_ssize_t i, k, n = n0, last
    cdef double lnu = sigma * sqrt(dt), g0, g1
    for k in range(n0):
        S[k] = K * exp(lnu * (2 * k - top))
        V[k] = K - S[k] if K > S[k] else 0.0
    bnd[0] = K
    for i in range(1, N + 1):
        n -= 1
        last = -1
        for k in range(n):
            cont[k] = disc * (p * V[k + 1] + (1.0 - p) * V[k])
            S[k] = K * exp(lnu * (2 * k - top + i))
            pay[k] = K - S[k] if K > S[k] else 0.0
            V[k] = cont[k] if cont[k] > pay[k] else pay[k]
            if pay[k] >= cont[k] and pay[k] > 0:
                last = k
        if last < 0:
            bnd[i] = NAN
        elif last + 1 >= n:
            bnd[i] = S[last]
        else:
            g0 = cont[last] - pay[last]
            g1 = cont[last + 1] - pay[last + 1]
            if g1 <= g0:
                bnd[i] = S[last]
            else:
                bnd[i] = S[last] + (-g0 / (g1 - g0)) * (S[last + 1] - S[last])
    return bnd_arr


def psor_1d(double[::1] u, double[::1] rhs, double[::1] obstacle, double[::1] lower, double[::1] diag,
            double[::1] upper, double omega, double tol, Py_ssize_t max_sweeps):
    cdef Py_ssize_t n = u.shape[0], i, sweep
    cdef double err, gs, new
    for sweep in range(1, max_sweeps + 1):
        err = 0.0
        for i in range(1, n - 1):
            gs = (rhs[i] - lower[i] * u[i - 1] - upper[i] * u[i + 1]) / diag[i]
            new = u[i] + omega * (gs - u[i])
            if new < obstacle[i]:
                new = obstacle[i]
            if fabs(new - u[i]) > err:
                err = fabs(new - u[i])
            u[i] = new
        if err < tol:
            return sweep
    return -1


def psor_2d(double[:, ::1] u, double[:, ::1] rhs, double[:, ::1] obstacle, double[:, :, ::1] stencil,
            double omega, double tol, Py_ssize_t max_sweeps):
    cdef Py_ssize_t n1 = u.shape[0], n2 = u.shape[1], i, j, s, colour, sweep
    cdef int di[9]
    cdef int dj[9]
    cdef double acc, gs, new, err
    tmp_arr = np.empty((n1, n2))
    cdef double[:, ::1] tmp = tmp_arr
    for s in range(9):
        di[s] = s // 3 - 1
        dj[s] = s % 3 - 1
    for sweep in range(1, max_sweeps + 1):
        err = 0.0
        for colour in range(2):
            # Jacobi within a colour so diagonal couplings see the same values as the numpy path
            for i in range(1, n1 - 1):
                for j in range(1, n2 - 1):
                    if (i + j) % 2 != colour:
                        continue
                    acc = rhs[i, j]
                    for s in range(9):
                        if s == 4:
                            continue
                        acc = acc - stencil[s, i, j] * u[i + di[s], j + dj[s]]
                    gs = acc / stencil[4, i, j]
                    new = u[i, j] + omega * (gs - u[i, j])
                    if new < obstacle[i, j]:
                        new = obstacle[i, j]
                    tmp[i, j] = new
            for i in range(1, n1 - 1):
                for j in range(1, n2 - 1):
                    if (i + j) % 2 != colour:
                        continue
                    if fabs(tmp[i, j] - u[i, j]) > err:
                        err = fabs(tmp[i, j] - u[i, j])
                    u[i, j] = tmp[i, j]
        if err < tol:
            return sweep
    return -1
