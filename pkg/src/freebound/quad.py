"""Quadrature and Monte Carlo backends for the convolution integrals.

Deterministic rules are tensor Gauss-Legendre boxes matched to the frozen
Gaussian; the Monte Carlo rule draws from the same Gaussian (importance
sampling with a proposal close to the density). The time axis of boundary
convolutions is integrated after the substitution ``tau = t - sigma**2``,
which turns the ``(t - tau)^(-1/2)`` singularity into a smooth integrand.
"""
from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import kernels
from .errors import DomainError

logger = logging.getLogger(__name__)

KINDS = ("gauss-legendre-tensor", "mc")
MC_CHUNK = 1 << 14
WORKERS_ENV = "FREEBOUND_WORKERS"


class DegenerateProposalWarning(RuntimeWarning):
    pass


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class QuadratureRule:
    """Integration rule for convolutions over the domain or the hyperplane.

    ``nodes`` is the Gauss-Legendre count per axis, ``samples`` the Monte
    Carlo sample count, ``half_width`` the matched box half-width in standard
    deviations.
    """

    kind: str = "gauss-legendre-tensor"
    nodes: int = 16
    samples: int = 4096
    half_width: float = 7.0
    seed: int = 0
    workers: int = field(default_factory=default_workers)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown quadrature kind {self.kind!r}")
        if self.nodes < 2 or self.samples < 2:
            raise DomainError("quadrature needs at least two nodes or samples")

    @classmethod
    def for_dimension(cls, n: int, **kw):
        """Tensor Gauss-Legendre up to three assets, Monte Carlo beyond."""
        kw.setdefault("kind", "gauss-legendre-tensor" if n <= 3 else "mc")
        return cls(**kw)


@dataclass(frozen=True)
class Sampler:
    """Gaussian proposal ``y = mean + L xi`` with standard normal noise ``xi``."""

    mean: np.ndarray
    cov: np.ndarray

    @property
    def chol(self):
        return np.linalg.cholesky(np.atleast_2d(self.cov))

    def map(self, xi):
        return self.mean + xi @ self.chol.T

    def log_q(self, y):
        L = self.chol
        z = np.linalg.solve(L, (np.asarray(y) - self.mean).T).T
        d = L.shape[0]
        return -0.5 * np.sum(z * z, axis=-1) - 0.5 * d * np.log(2 * np.pi) - np.sum(np.log(np.diag(L)))


def parallel_map(fn: Callable, items, workers: int = 1):
    """Ordered map over a thread pool; ``workers <= 1`` runs inline."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def chunk_normals(seed: int, total: int, d: int, chunk: int = MC_CHUNK):
    """Standard normal draws in fixed chunks, each with its own seed stream.

    Chunking is independent of the worker count, so results are bit-identical
    for any pool size.
    """
    out = []
    for c, start in enumerate(range(0, total, chunk)):
        m = min(chunk, total - start)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(c,)))
        out.append(rng.standard_normal((m, d)))
    return out


def gauss_legendre_box(lo, hi, nodes: int):
    """Tensor Gauss-Legendre points ``(Q, d)`` and weights ``(Q,)`` on a box."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    g, w = np.polynomial.legendre.leggauss(nodes)
    axes = [0.5 * (h + l) + 0.5 * (h - l) * g for l, h in zip(lo, hi)]
    wts = [0.5 * (h - l) * w for l, h in zip(lo, hi)]
    P = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(lo))
    W = np.prod(np.stack(np.meshgrid(*wts, indexing="ij"), axis=-1).reshape(-1, len(lo)), axis=-1)
    return P, W


def _matched_box(mean, cov, rule: QuadratureRule, nodes: int, domain=None):
    sd = np.sqrt(np.diag(np.atleast_2d(cov)))
    lo = mean - rule.half_width * sd
    hi = mean + rule.half_width * sd
    if domain is not None:
        lo = np.maximum(lo, domain[0])
        hi = np.minimum(hi, domain[1])
        if np.any(hi <= lo):
            return np.zeros((0, len(mean))), np.zeros(0)
    return gauss_legendre_box(lo, hi, nodes)


def convolve_initial(p, f: Callable, t: float, x, rule: QuadratureRule, s: float = 0.0, domain=None):
    """``int_O p(t, x; s, y) f(y) dy`` and an error estimate.

    ``p`` is a :class:`~freebound.wkb.WkbDensity`, ``domain`` an optional box
    ``(lo, hi)`` truncating ``O``. The estimate is the Richardson-style change
    between ``nodes`` and ``nodes // 2`` for the tensor rule and the sample
    standard error for Monte Carlo.
    """
    x = np.asarray(x, dtype=float)
    mean, cov = p.moments(t, x, s)
    if domain is not None:
        domain = (np.asarray(domain[0], float), np.asarray(domain[1], float))
        sd = np.sqrt(np.diag(cov))
        if np.any(mean - rule.half_width * sd < domain[0] - 1e-12) or np.any(mean + rule.half_width * sd > domain[1] + 1e-12):
            logger.debug("integration domain truncates the matched box")
    if rule.kind == "gauss-legendre-tensor":
        def integrate(nodes):
            pts, wts = _matched_box(mean, cov, rule, nodes, domain)
            if len(wts) == 0:
                return 0.0
            vals = p.density(t, np.broadcast_to(x, pts.shape), s, pts) * f(pts)
            return float(np.dot(wts, vals))

        fine = integrate(rule.nodes)
        coarse = integrate(max(2, rule.nodes // 2))
        return fine, abs(fine - coarse)

    sampler = Sampler(mean, cov)
    draws = chunk_normals(rule.seed, rule.samples, len(x))

    def chunk_sum(xi):
        y = sampler.map(xi)
        vals = np.exp(p.log_density(t, np.broadcast_to(x, y.shape), s, y) - sampler.log_q(y)) * f(y)
        if domain is not None:
            vals = vals * np.all((y >= domain[0]) & (y <= domain[1]), axis=-1)
        return _moments(vals)

    mean_est, se = _combine(parallel_map(chunk_sum, draws, rule.workers))
    return mean_est, se


def _moments(vals):
    m = vals.mean()
    return len(vals), m, float(np.sum((vals - m) ** 2))


def _combine(parts):
    """Mean and standard error from per-chunk ``(count, mean, centred sum of squares)``, in chunk order."""
    n, mean, m2 = 0, 0.0, 0.0
    for nb, mb, m2b in parts:
        tot = n + nb
        delta = mb - mean
        mean = mean + delta * nb / tot
        m2 = m2 + m2b + delta * delta * n * nb / tot
        n = tot
    return float(mean), float(np.sqrt(m2 / (n - 1) / n))


def mc_derivative(p, u: Callable, x, order, sampler: Optional[Sampler] = None, samples: int = 100_000,
                  t: float = 1.0, s: float = 0.0, seed: int = 0, workers: int = 1):
    """Likelihood-ratio estimate of ``D^alpha_x int p(t, x; s, y) u(y) dy``.

    ``order`` is a multi-index (per-axis derivative counts, total at most 2).
    Samples are drawn from ``sampler`` (default: the Gaussian matched to the
    density at ``x``) and the derivative falls on the analytic density.
    Returns ``(estimate, stderr)``; a proposal whose stderr exceeds ten times
    the estimate is flagged with :class:`DegenerateProposalWarning`.
    """
    x = np.asarray(x, dtype=float)
    alpha = tuple(int(a) for a in order) if len(order) else (0,) * len(x)
    if len(alpha) != len(x) or sum(alpha) > 2 or min(alpha) < 0:
        raise DomainError(f"unsupported derivative multi-index {order!r}")
    if samples < 2:
        raise DomainError("need at least two samples")
    if sampler is None:
        sampler = Sampler(*p.moments(t, x, s))
    axes = [i for i, a in enumerate(alpha) for _ in range(a)]

    def chunk_sum(xi):
        y = sampler.map(xi)
        xb = np.broadcast_to(x, y.shape)
        if not axes:
            val = p.density(t, xb, s, y)
        else:
            der = p.density_derivatives(t, xb, s, y)
            val = der.grad[:, axes[0]] if len(axes) == 1 else der.hess[:, axes[0], axes[1]]
        w = val * u(y) * np.exp(-sampler.log_q(y))
        return _moments(w)

    est, se = _combine(parallel_map(chunk_sum, chunk_normals(seed, samples, len(x)), workers))
    if se > 10 * abs(est):
        warnings.warn(f"degenerate proposal: stderr {se:.3e} vs estimate {est:.3e}", DegenerateProposalWarning)
    return float(est), se


# time axis

@dataclass(frozen=True)
class TimeNodes:
    """Quadrature nodes for ``int_0^{t_k} g(tau) dtau`` split over grid intervals.

    ``weight`` already contains the Jacobian ``2 sigma`` of the substitution,
    ``left``/``h0``/``h1`` locate the interval and the hat-function values of
    its two end nodes.
    """

    tau: np.ndarray
    delta: np.ndarray
    weight: np.ndarray
    left: np.ndarray
    h0: np.ndarray
    h1: np.ndarray
    dh: np.ndarray


def time_nodes(t, k: int, n_sigma: int = 8, basis: str = "sqrt", first_panel_nodes: Optional[int] = None) -> TimeNodes:
    """Product-integration nodes on ``[0, t_k]`` with ``tau = t_k - sigma**2`` per interval.

    ``basis='sqrt'`` uses hats linear in ``sqrt(tau)``, ``'linear'`` hats
    linear in ``tau``. ``dh`` is the derivative of the right hat ``h1`` in
    ``tau`` (the left hat has ``-dh``).
    """
    t = np.asarray(t, dtype=float)
    if k < 1:
        empty = np.zeros(0)
        return TimeNodes(empty, empty, empty, np.zeros(0, dtype=np.intp), empty, empty, empty)
    tk = t[k]
    g, w = np.polynomial.legendre.leggauss(n_sigma)
    j = np.arange(k)
    s_lo = np.sqrt(np.maximum(tk - t[j + 1], 0.0))
    s_hi = np.sqrt(tk - t[j])
    sig = 0.5 * (s_hi + s_lo)[:, None] + 0.5 * (s_hi - s_lo)[:, None] * g
    wt = 0.5 * (s_hi - s_lo)[:, None] * w * 2.0 * sig
    if first_panel_nodes and first_panel_nodes > n_sigma:
        # the interval touching tau = 0 has a sqrt endpoint singularity in the sqrt basis
        g2, w2 = np.polynomial.legendre.leggauss(first_panel_nodes)
        s0 = 0.5 * (s_hi[0] + s_lo[0]) + 0.5 * (s_hi[0] - s_lo[0]) * g2
        w0 = 0.5 * (s_hi[0] - s_lo[0]) * w2 * 2.0 * s0
        sig = [s0] + list(sig[1:])
        wt = [w0] + list(wt[1:])
        left = np.concatenate([np.full(len(s), jj, dtype=np.intp) for jj, s in zip(j, sig)])
        sig = np.concatenate(sig)
        wt = np.concatenate(wt)
    else:
        left = np.repeat(j, n_sigma).astype(np.intp)
        sig = sig.ravel()
        wt = wt.ravel()
    delta = sig**2
    tau = tk - delta
    if basis == "sqrt":
        sq = np.sqrt(t)
        rt = np.sqrt(np.maximum(tau, 0.0))
        span = sq[left + 1] - sq[left]
        h1 = (rt - sq[left]) / span
        with np.errstate(divide="ignore"):
            dh = np.where(rt > 0, 1.0 / (2.0 * np.maximum(rt, 1e-300) * span), 0.0)
    elif basis == "linear":
        span = t[left + 1] - t[left]
        h1 = (tau - t[left]) / span
        dh = 1.0 / span
    else:
        raise DomainError(f"unknown time basis {basis!r}")
    return TimeNodes(tau=tau, delta=delta, weight=wt, left=left, h0=1.0 - h1, h1=h1, dh=dh)


# angle axis

def lagrange_stencil(axis, pts):
    """Four-point Lagrange interpolation on a uniform axis with constant extrapolation.

    Returns integer indices and weights of shape ``pts.shape + (4,)``.
    """
    axis = np.asarray(axis, dtype=float)
    pts = np.asarray(pts, dtype=float)
    m = len(axis)
    h = axis[1] - axis[0]
    u = (np.clip(pts, axis[0], axis[-1]) - axis[0]) / h
    if m < 4:
        i = np.clip(np.floor(u).astype(np.intp), 0, m - 2)
        f = u - i
        idx = np.stack([i, i + 1, i + 1, i + 1], axis=-1)
        wts = np.stack([1 - f, f, np.zeros_like(f), np.zeros_like(f)], axis=-1)
        return idx, wts
    i = np.clip(np.floor(u).astype(np.intp) - 1, 0, m - 4)
    f = u - i
    idx = i[..., None] + np.arange(4)
    w0 = -(f - 1) * (f - 2) * (f - 3) / 6.0
    w1 = f * (f - 2) * (f - 3) / 2.0
    w2 = -f * (f - 1) * (f - 3) / 2.0
    w3 = f * (f - 1) * (f - 2) / 6.0
    return idx, np.stack([w0, w1, w2, w3], axis=-1)


def tensor_stencil(axes, pts):
    """Flattened tensor Lagrange stencil: indices into the raveled grid and weights, ``(..., 4**d)``."""
    d = len(axes)
    if d == 0:
        shape = np.shape(pts)[:-1] if np.ndim(pts) else ()
        return np.zeros(shape + (1,), dtype=np.intp), np.ones(shape + (1,))
    sizes = [len(a) for a in axes]
    idx, wts = None, None
    for m in range(d):
        i_m, w_m = lagrange_stencil(axes[m], pts[..., m])
        if idx is None:
            idx, wts = i_m, w_m
        else:
            idx = (idx[..., :, None] * sizes[m] + i_m[..., None, :]).reshape(idx.shape[:-1] + (-1,))
            wts = (wts[..., :, None] * w_m[..., None, :]).reshape(wts.shape[:-1] + (-1,))
    return idx, wts


def unit_nodes(d: int, rule: QuadratureRule):
    """Reference nodes ``xi`` and weights for a standardised hyperplane integral.

    For the tensor rule, ``int f(c + L xi) |det L| dxi`` is approximated on
    ``[-hw, hw]^d``; for Monte Carlo the weights include the inverse standard
    normal density so the same affine map applies.
    """
    if d == 0:
        return np.zeros((1, 0)), np.ones(1)
    if rule.kind == "gauss-legendre-tensor":
        hw = rule.half_width
        return gauss_legendre_box(-hw * np.ones(d), hw * np.ones(d), rule.nodes)
    xi = np.concatenate(chunk_normals(rule.seed, rule.samples, d))
    w = np.exp(0.5 * np.sum(xi * xi, axis=-1)) * (2 * np.pi) ** (d / 2) / len(xi)
    return xi, w


def boundary_weights(kernel, t, k: int, zeta_axes, targets, rule: QuadratureRule, n_sigma: int = 8,
                     basis: str = "sqrt", first_panel_nodes: Optional[int] = None, unit=None):
    """Product-integration weights of a hyperplane convolution at time ``t_k``.

    ``kernel`` provides ``place(tk, targets, tn)`` returning the centre ``(P, T, d)``
    and a matrix ``L`` ``(P, T, d, d)`` scaling the reference nodes, and
    ``values(tk, targets, tn, eta)`` returning ``(C, P, T, Q)`` kernel channels
    at hyperplane points ``eta`` ``(P, T, Q, d)``. The result ``W`` has shape
    ``(C, P, k+1, M)`` with ``M`` the number of angle grid nodes, so that the
    convolution of channel ``c`` with ``phi`` is ``W[c] . phi[:k+1]``.
    """
    t = np.asarray(t, dtype=float)
    tn = time_nodes(t, k, n_sigma, basis, first_panel_nodes)
    d = len(zeta_axes)
    M = int(np.prod([len(a) for a in zeta_axes])) if d else 1
    P = len(targets)
    if k < 1:
        return None, tn
    xi, xw = unit if unit is not None else unit_nodes(d, rule)
    centre, L = kernel.place(t[k], targets, tn)
    if d:
        eta = centre[:, :, None, :] + np.einsum("ptij,qj->ptqi", L, xi)
        jac = np.abs(np.linalg.det(L))
    else:
        eta = np.zeros((P, len(tn.tau), 1, 0))
        jac = np.ones((P, len(tn.tau)))
    vals = kernel.values(t[k], targets, tn, eta)  # (C, P, T, Q)
    coef = vals * (tn.weight[None, None, :, None] * jac[None, :, :, None] * xw[None, None, None, :])
    sidx, sw = tensor_stencil(zeta_axes, eta)  # (P, T, Q, S)
    W = kernels.scatter_hat_stencil(coef, tn.left, tn.h0, tn.h1, sidx, sw, k + 1, M)
    return W, tn


def convolve_boundary(p, phi, t: float, xhat, rule: QuadratureRule, n_sigma: int = 8):
    """``int_0^t int_H p(t, (0, zeta); tau, (0, eta)) phi(tau, eta) deta dtau`` at one angle.

    ``p`` is a density in log coordinates ``(z, zeta)`` (a
    :class:`~freebound.wkb.WkbDensity` of dimension ``n``) and ``phi`` a
    :class:`~freebound.volterra.BoundaryDensity`. ``t`` must be a node of
    ``phi.t``.
    """
    from .frontfix import zeta_from_xhat

    tgrid = np.asarray(phi.t, dtype=float)
    if t > tgrid[-1] + 1e-14:
        raise DomainError(f"boundary density grid ends at {tgrid[-1]}, before t={t}")
    k = int(np.argmin(np.abs(tgrid - t)))
    if abs(tgrid[k] - t) > 1e-12 * max(1.0, t):
        raise DomainError("convolve_boundary expects t on the boundary density grid")
    if k == 0:
        return 0.0
    d = len(phi.zeta_axes)
    target = np.atleast_2d(zeta_from_xhat(np.asarray(xhat, float))) if d else np.zeros((1, 0))
    adapter = DensityKernel(p)
    W, _ = boundary_weights(adapter, tgrid, k, phi.zeta_axes, target, rule, n_sigma=n_sigma)
    return float(np.einsum("jm,jm->", W[0, 0], phi.values[:k + 1].reshape(k + 1, -1)))


class DensityKernel:
    """Adapter exposing a log-coordinate density to :func:`boundary_weights`."""

    def __init__(self, p, channels=("p",)):
        self.p = p
        self.channels = channels

    def place(self, tk, targets, tn):
        P, T = len(targets), len(tn.tau)
        d = targets.shape[1]
        centre = np.zeros((P, T, d))
        L = np.zeros((P, T, d, d))
        for i, zt in enumerate(targets):
            x = np.concatenate([[0.0], zt])
            for q, tau in enumerate(tn.tau):
                mean, cov = self.p.moments(tk, x, tau)
                c, S = conditional_on_first(mean, cov)
                centre[i, q] = c
                L[i, q] = np.linalg.cholesky(S) if d else S
        return centre, L

    def values(self, tk, targets, tn, eta):
        P, T, Q, d = eta.shape
        x = np.concatenate([np.zeros((P, 1)), targets], axis=1)[:, None, None, :]
        y = np.concatenate([np.zeros(eta.shape[:-1] + (1,)), eta], axis=-1)
        tau = tn.tau[None, :, None]
        xb = np.broadcast_to(x, y.shape)
        tt = np.broadcast_to(np.asarray(tk, float), tau.shape)
        out = []
        for ch in self.channels:
            if ch == "p":
                out.append(self.p.density(np.broadcast_to(tt, y.shape[:-1]), xb, np.broadcast_to(tau, y.shape[:-1]), y))
            elif ch == "dz":
                der = self.p.density_derivatives(np.broadcast_to(tt, y.shape[:-1]), xb,
                                                 np.broadcast_to(tau, y.shape[:-1]), y)
                out.append(der.dx1)
        return np.stack(out)


def conditional_on_first(mean, cov):
    """Mean and covariance of coordinates ``2..n`` given coordinate 1 equal to zero."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if mean.shape[-1] == 1:
        return mean[..., 1:], cov[..., 1:, 1:]
    s11 = cov[..., 0, 0]
    s21 = cov[..., 1:, 0]
    c = mean[..., 1:] + s21 / s11[..., None] * (0.0 - mean[..., 0])[..., None]
    S = cov[..., 1:, 1:] - s21[..., :, None] * s21[..., None, :] / s11[..., None, None]
    return c, S


def abel_reference(t):
    """``int_0^t (t - tau)^(-1/2) dtau = 2 sqrt(t)``."""
    return 2.0 * np.sqrt(t)
