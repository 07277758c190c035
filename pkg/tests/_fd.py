"""Finite-difference helpers shared by the tests (fourth-order central stencils)."""
import numpy as np

_C1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_C2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0
_OFF = np.arange(-2, 3)


def grad(f, x, h=1e-3):
    x = np.asarray(x, float)
    out = np.zeros(len(x))
    for i in range(len(x)):
        e = np.zeros(len(x))
        e[i] = h
        out[i] = sum(c * f(x + o * e) for c, o in zip(_C1, _OFF)) / h
    return out


def hess(f, x, h=1e-3):
    x = np.asarray(x, float)
    n = len(x)
    out = np.zeros((n, n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h
        out[i, i] = sum(c * f(x + o * ei) for c, o in zip(_C2, _OFF)) / h**2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h
            val = sum(ci * cj * f(x + oi * ei + oj * ej)
                      for ci, oi in zip(_C1, _OFF) for cj, oj in zip(_C1, _OFF)) / h**2
            out[i, j] = out[j, i] = val
    return out
