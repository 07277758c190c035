"""Pure numpy implementations of the hot loops; reference for the compiled core."""
import numpy as np


def scatter_hat_stencil(coef, left, h0, h1, sidx, sw, nt, M):
    """Accumulate kernel samples onto (time hat, angle stencil) basis weights.

    ``coef`` is ``(C, P, T, Q)``, ``left``/``h0``/``h1`` are ``(T,)``, the
    stencil ``sidx``/``sw`` is ``(P, T, Q, S)``. Returns ``(C, P, nt, M)``.
    """
    C, P, T, Q = coef.shape
    S = sidx.shape[-1]
    out = np.zeros((C, P, nt, M))
    pi = np.arange(P)[:, None, None, None]
    base_l = (pi * nt + left[None, :, None, None]) * M + sidx
    base_r = base_l + M
    wl = sw * h0[None, :, None, None]
    wr = sw * h1[None, :, None, None]
    idx = np.concatenate([base_l.ravel(), base_r.ravel()])
    for c in range(C):
        cf = coef[c][..., None]
        vals = np.concatenate([(cf * wl).ravel(), (cf * wr).ravel()])
        out[c] = np.bincount(idx, weights=vals, minlength=P * nt * M).reshape(P, nt, M)
    del S, Q
    return out


def crr_layers(K, r, sigma, T, N, width):
    """Backward induction on a widened CRR lattice.

    Maturity nodes are ``K * u**m`` for ``m = -(N + width) .. N + width`` in
    steps of two; each layer keeps every node whose two children exist.
    Returns per-layer boundary estimates (NaN when no exercise node is found)
    indexed by time-to-maturity ``i * dt``.
    """
    dt = T / N
    u = np.exp(sigma * np.sqrt(dt))
    d = 1.0 / u
    p = (np.exp(r * dt) - d) / (u - d)
    disc = np.exp(-r * dt)
    top = N + width
    m = np.arange(-top, top + 1, 2)
    S = K * u ** m.astype(float)
    V = np.maximum(K - S, 0.0)
    bnd = np.full(N + 1, np.nan)
    bnd[0] = K
    for i in range(1, N + 1):
        cont = disc * (p * V[1:] + (1.0 - p) * V[:-1])
        m = m[:-1] + 1
        S = K * u ** m.astype(float)
        pay = np.maximum(K - S, 0.0)
        V = np.maximum(cont, pay)
        bnd[i] = _flip(S, cont, pay)
    return bnd


def _flip(S, cont, pay):
    ex = (pay >= cont) & (pay > 0)
    if not ex.any():
        return np.nan
    last = np.nonzero(ex)[0].max()
    if last + 1 >= len(S):
        return S[last]
    g0 = cont[last] - pay[last]
    g1 = cont[last + 1] - pay[last + 1]
    if g1 <= g0:
        return S[last]
    w = -g0 / (g1 - g0)
    return S[last] + w * (S[last + 1] - S[last])


def psor_1d(u, rhs, obstacle, lower, diag, upper, omega, tol, max_sweeps):
    """Projected SOR for a tridiagonal LCP; end nodes are held fixed. Returns sweep count."""
    n = len(u)
    for sweep in range(1, max_sweeps + 1):
        err = 0.0
        for i in range(1, n - 1):
            gs = (rhs[i] - lower[i] * u[i - 1] - upper[i] * u[i + 1]) / diag[i]
            new = max(obstacle[i], u[i] + omega * (gs - u[i]))
            err = max(err, abs(new - u[i]))
            u[i] = new
        if err < tol:
            return sweep
    return -1


def psor_2d(u, rhs, obstacle, stencil, omega, tol, max_sweeps):
    """Red-black projected SOR for a nine-point stencil on interior nodes.

    ``stencil`` has shape ``(9, n1, n2)`` ordered as offsets
    ``(di, dj)`` in ``(-1,-1), (-1,0), (-1,1), (0,-1), (0,0), (0,1), (1,-1), (1,0), (1,1)``.
    Boundary rows and columns are held fixed. Returns the sweep count or -1.
    """
    n1, n2 = u.shape
    offs = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)]
    ii, jj = np.meshgrid(np.arange(1, n1 - 1), np.arange(1, n2 - 1), indexing="ij")
    colours = [((ii + jj) % 2 == c) for c in (0, 1)]
    for sweep in range(1, max_sweeps + 1):
        err = 0.0
        for mask in colours:
            I = ii[mask]
            J = jj[mask]
            acc = rhs[I, J].copy()
            for s, (di, dj) in enumerate(offs):
                if s == 4:
                    continue
                acc -= stencil[s, I, J] * u[I + di, J + dj]
            gs = acc / stencil[4, I, J]
            new = np.maximum(obstacle[I, J], u[I, J] + omega * (gs - u[I, J]))
            err = max(err, float(np.max(np.abs(new - u[I, J]))) if len(I) else 0.0)
            u[I, J] = new
        if err < tol:
            return sweep
    return -1
