"""Second-kind Volterra equation for the boundary density on the hyperplane ``x1 = 1``.

The equation has the form ``jump * phi(t) = Gamma(t) + int_0^t int_H k(t, .; tau, .) phi(tau, .)``
and is solved by time marching with product integration: the history
integral at ``t_k`` uses ``phi`` at earlier nodes, and the small dense
system for ``phi(t_k, .)`` collects the contribution of the last interval.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import quad
from .errors import DomainError, VolterraConditionError

logger = logging.getLogger(__name__)

COND_MAX = 1e8


@dataclass
class BoundaryDensity:
    """``phi(tau, zeta)`` on the solver time grid times the log-ratio angle grid."""

    t: np.ndarray
    zeta_axes: tuple
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def d(self):
        return len(self.zeta_axes)

    def flat(self):
        return self.values.reshape(len(self.t), -1)

    def to_csv(self, path, header: Optional[dict] = None):
        """Rows ``(tau, x_2..x_n, phi, phi_zeta)``.

        ``phi`` is the density with respect to the simplex angles and
        ``phi_zeta`` with respect to the log-ratio coordinates used
        internally; they differ by the Jacobian of the angle map.
        """
        from .frontfix import xhat_from_zeta, zeta_derivatives

        d = self.d
        with open(path, "w", newline="") as fh:
            for key, val in (header or {}).items():
                fh.write(f"# {key}={val}\n")
            w = csv.writer(fh)
            w.writerow(["tau"] + [f"x{j + 2}" for j in range(d)] + ["phi", "phi_zeta"])
            if d:
                mesh = np.stack(np.meshgrid(*self.zeta_axes, indexing="ij"), axis=-1).reshape(-1, d)
                xh = xhat_from_zeta(mesh)
                D, _ = zeta_derivatives(xh)
                jac = np.abs(np.linalg.det(D))
                order = np.lexsort(xh.T[::-1])
            else:
                xh = np.zeros((1, 0))
                jac = np.ones(1)
                order = np.arange(1)
            for k, tk in enumerate(self.t):
                row = self.values[k].reshape(-1)
                for i in order:
                    w.writerow([repr(float(v)) for v in (tk, *xh[i], row[i] * jac[i], row[i])])


class VolterraKernel:
    """Memory kernel ``k(t, tau)`` of a scalar (angle-free) Volterra equation.

    For the boundary equation this is ``dp/dx1 - p``, half the kernel often
    written ``Z1``. ``exponent`` is the strength of the ``(t - tau)^(-exponent)``
    singularity, at most one half (the product rule removes it exactly).
    """

    def __init__(self, evaluate: Callable, exponent: float = 0.5, n_sigma: int = 8, basis: str = "linear"):
        if exponent > 0.5:
            raise DomainError("product integration handles singularities up to (t - tau)^(-1/2)")
        self.evaluate = evaluate
        self.exponent = exponent
        self.n_sigma = n_sigma
        self.basis = basis

    def weights(self, t, k):
        """Row ``W[0, j, 0]`` with ``int_0^{t_k} k(t_k, tau) phi(tau) dtau ~ sum_j W phi_j``."""
        tn = quad.time_nodes(t, k, self.n_sigma, self.basis)
        W = np.zeros((1, k + 1, 1))
        if k == 0:
            return W
        vals = self.evaluate(t[k], tn.tau) * tn.weight
        np.add.at(W[0, :, 0], tn.left, vals * tn.h0)
        np.add.at(W[0, :, 0], tn.left + 1, vals * tn.h1)
        return W

    def z1(self, t, tau):
        return 2.0 * self.evaluate(t, tau)

    def singularity_constant(self, t, samples=64):
        """Fitted ``C`` with ``|Z1(t, tau)| <= C (t - tau)^(-1/2)`` over sampled pairs."""
        t = np.asarray(t, float)
        worst = 0.0
        for tk in t[1:]:
            tau = tk - tk * np.linspace(1e-6, 1.0, samples)
            worst = max(worst, float(np.max(np.abs(self.z1(tk, tau)) * np.sqrt(tk - tau))))
        return worst


def march_step(W, gamma_k, history, jump, k, cond_max=COND_MAX):
    """Solve for ``phi(t_k, .)`` given weights ``W`` ``(m, k+1, m)`` and ``history = phi[:k]`` ``(k, m)``.

    ``jump`` is a scalar or per-target array multiplying ``phi`` on the left.
    """
    m = W.shape[0]
    rhs = np.asarray(gamma_k, dtype=float).reshape(m).copy()
    if k:
        rhs += np.einsum("ijm,jm->i", W[:, :k, :], history[:k])
    A = np.diag(np.broadcast_to(np.asarray(jump, dtype=float), (m,))) - W[:, k, :]
    if m == 1:
        if abs(A[0, 0]) < 1.0 / cond_max:
            raise VolterraConditionError(f"singular step at time index {k}", np.inf, k)
        return rhs / A[0, 0]
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > cond_max:
        raise VolterraConditionError(f"step matrix condition {cond:.3e} exceeds {cond_max:.1e} at time index {k}",
                                     cond, k)
    return np.linalg.solve(A, rhs)


def solve_volterra(kernel, gamma, t, zeta_axes=(), jump=0.5, cond_max=COND_MAX) -> BoundaryDensity:
    """Time-marching product-integration solution of ``jump * phi = Gamma + int k phi``.

    ``kernel`` exposes ``weights(t, k)`` returning ``(m, k+1, m)``; ``gamma``
    has shape ``(Nt+1, m_1, .., m_d)`` (or ``(Nt+1,)`` without angles).
    """
    t = np.asarray(t, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape[0] != len(t):
        raise DomainError("Gamma must be given on every time node")
    shape = gamma.shape
    g = gamma.reshape(len(t), -1)
    m = g.shape[1]
    phi = np.zeros_like(g)
    jump_arr = np.broadcast_to(np.asarray(jump, dtype=float), (m,))
    if np.any(np.abs(jump_arr) < 1.0 / cond_max):
        raise VolterraConditionError("jump factor vanishes at the first time node", np.inf, 0)
    phi[0] = g[0] / jump_arr
    for k in range(1, len(t)):
        W = kernel.weights(t, k)
        if W.shape != (m, k + 1, m):
            raise DomainError(f"kernel weights have shape {W.shape}, expected {(m, k + 1, m)}")
        phi[k] = march_step(W, g[k], phi, jump_arr, k, cond_max)
    return BoundaryDensity(t=t, zeta_axes=tuple(zeta_axes), values=phi.reshape(shape))


def gamma(p, psi0: Callable, t: float, xhat, rule: quad.QuadratureRule, K_eff: float, s: float = 0.0,
          z_max: float = 10.0):
    """Source term ``int_O (dp/dx1 - p)(t, (0, zeta); s, y) psi0(y) dy + K_eff``.

    ``p`` is a density in log coordinates ``(z, zeta)`` with ``O = {z >= 0}``
    truncated at ``z_max``; ``psi0`` takes points of shape ``(..., n)``.
    The tensor rule integrates on the matched box intersected with ``O``.
    """
    from .frontfix import zeta_from_xhat

    d = p.n - 1
    zeta = zeta_from_xhat(np.asarray(xhat, float)) if d else np.zeros(0)
    x = np.concatenate([[0.0], zeta])
    mean, cov = p.moments(t, x, s)
    sd = np.sqrt(np.diag(cov))
    lo = mean - rule.half_width * sd
    hi = mean + rule.half_width * sd
    lo[0] = max(lo[0], 0.0)
    hi[0] = min(hi[0], z_max)
    if hi[0] <= lo[0]:
        return float(K_eff)
    if rule.kind == "gauss-legendre-tensor":
        pts, wts = quad.gauss_legendre_box(lo, hi, rule.nodes)
        der = p.density_derivatives(np.full(len(pts), t), np.broadcast_to(x, pts.shape), np.full(len(pts), s), pts)
        return float(np.dot(wts, (der.dx1 - der.p) * psi0(pts))) + float(K_eff)
    sampler = quad.Sampler(mean, cov)
    xi = np.concatenate(quad.chunk_normals(rule.seed, rule.samples, len(x)))
    y = sampler.map(xi)
    inside = (y[:, 0] >= 0) & (y[:, 0] <= z_max)
    der = p.density_derivatives(np.full(len(y), t), np.broadcast_to(x, y.shape), np.full(len(y), s), y)
    vals = (der.dx1 - der.p) * psi0(y) * np.exp(-sampler.log_q(y)) * inside
    return float(vals.mean()) + float(K_eff)
