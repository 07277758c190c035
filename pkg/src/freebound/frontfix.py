"""Front-fixing change of variables and the coefficients of the transformed operator.

Assets ``S`` map to a scaled index level ``x1 = sum(S) / F`` and angle
variables ``x_j = S_j / sum(S)`` for ``j >= 2``, so the unknown exercise
boundary becomes the fixed hyperplane ``x1 = 1``. Angles live in the open
simplex; internally the boundary surface is tabulated on a tensor grid of
additive log-ratio coordinates ``zeta_j = ln(x_j / x_0)`` with
``x_0 = 1 - sum(x_j)``, which maps the simplex onto all of R^(n-1).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import DomainError
from .model import MarketModel

logger = logging.getLogger(__name__)

SIMPLEX_MARGIN = 1e-3


@dataclass(frozen=True)
class TransformedPoint:
    t: float
    x1: float
    xhat: np.ndarray

    @property
    def n(self) -> int:
        return 1 + len(self.xhat)


@dataclass(frozen=True)
class TransformedCoefficients:
    """Second-order matrix ``a``, drift ``b`` and zero-order term ``c`` of the transformed operator."""

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray


# point maps

def to_scaled(S, F_value):
    """Vectorised forward map, returns ``(x1, xhat)``."""
    S = np.asarray(S, dtype=float)
    if np.any(~(S > 0)):
        raise DomainError("asset prices must be strictly positive")
    F_value = np.asarray(F_value, dtype=float)
    if np.any(~(F_value > 0)):
        raise DomainError("boundary value must be positive")
    total = S.sum(axis=-1)
    return total / F_value, S[..., 1:] / total[..., None]


def from_scaled(x1, xhat, F_value):
    x1 = np.asarray(x1, dtype=float)
    xhat = np.asarray(xhat, dtype=float)
    rest = 1.0 - xhat.sum(axis=-1)
    if np.any(rest <= 0) or np.any(xhat <= 0):
        raise DomainError("angle variables must lie in the open simplex")
    level = x1 * np.asarray(F_value, dtype=float)
    return np.concatenate([(level * rest)[..., None], xhat * level[..., None]], axis=-1)


def to_transformed(S, F_value, t: float = 0.0) -> TransformedPoint:
    x1, xhat = to_scaled(S, F_value)
    return TransformedPoint(t=float(t), x1=float(x1), xhat=np.asarray(xhat, dtype=float))


def from_transformed(p: TransformedPoint, F_value) -> np.ndarray:
    return from_scaled(p.x1, p.xhat, F_value)


def jacobian(p: TransformedPoint, F_value: float, F_grad=None) -> np.ndarray:
    """Matrix ``J[i, j] = dx_j / dS_i`` with ``x_1`` in column 0.

    ``F_grad`` holds ``dF/dx_j`` for ``j = 2..n`` (zeros if omitted).
    """
    J, _ = _scaled_derivatives(np.asarray(p.x1, float), np.asarray(p.xhat, float), np.asarray(F_value, float),
                               _zero_grad(p, F_grad), None, second=False)
    return J


def _zero_grad(p, F_grad):
    d = len(p.xhat)
    return np.zeros(d) if F_grad is None else np.asarray(F_grad, dtype=float)


def _scaled_derivatives(x1, xhat, F, F_grad, F_hess, second=True):
    """First and (optionally) second derivatives of ``x(S)``, vectorised over leading axes.

    Returns ``J[..., i, j] = dx_j/dS_i`` and ``H[..., j, i, k] = d2 x_j / dS_i dS_k``.
    """
    d = xhat.shape[-1]
    n = d + 1
    total = x1 * F
    eye = np.eye(n)
    # angle rows: (delta_ij - x_j) / sum(S), i over assets, j over angles 2..n
    xa = np.concatenate([np.zeros(xhat.shape[:-1] + (1,)), xhat], axis=-1)
    dang = (eye[:, 1:] - xhat[..., None, :]) / total[..., None, None]  # (..., n, d)
    P = np.einsum("...ij,...j->...i", dang, F_grad)  # sum_j F_j dx_j/dS_i
    d1 = 1.0 / F[..., None] - (total / F**2)[..., None] * P
    J = np.concatenate([d1[..., :, None], dang], axis=-1)
    if not second:
        return J, None

    H = np.zeros(xhat.shape[:-1] + (n, n, n))
    # d2 x_j / dS_i dS_k = -[(delta_kj - x_j) + (delta_ij - x_j)] / sum(S)^2
    for j in range(1, n):
        col = eye[:, j] - xa[..., j, None]  # (..., n)
        H[..., j, :, :] = -(col[..., :, None] + col[..., None, :]) / (total**2)[..., None, None]
    dP = np.einsum("...jl,...kl,...ij->...ik", F_hess, dang, dang) + np.einsum("...j,...jik->...ik", F_grad, H[..., 1:, :, :])
    H[..., 0, :, :] = (
        -(P[..., :, None] + P[..., None, :]) / (F**2)[..., None, None]
        + 2.0 * (total / F**3)[..., None, None] * P[..., :, None] * P[..., None, :]
        - (total / F**2)[..., None, None] * dP
    )
    return J, H


def transformed_coefficients_arrays(model: MarketModel, t, x1, xhat, F, F_grad, F_hess, F_t=0.0):
    """Vectorised transformed coefficients at points ``(t, x1, xhat)``.

    ``F``, ``F_grad`` (``dF/dx_j``), ``F_hess`` and ``F_t`` are the boundary
    surface and its derivatives at the angle of each point.
    """
    x1 = np.asarray(x1, dtype=float)
    xhat = np.asarray(xhat, dtype=float)
    F = np.asarray(F, dtype=float)
    if np.any(~(F > 0)):
        raise DomainError("boundary value must be positive")
    if xhat.shape[-1] and (np.any(xhat.sum(axis=-1) >= 1.0) or np.any(xhat <= 0)):
        raise DomainError("angle variables must lie in the open simplex")
    F_grad = np.asarray(F_grad, dtype=float)
    F_hess = np.asarray(F_hess, dtype=float)
    S = from_scaled(x1, xhat, F)
    J, H = _scaled_derivatives(x1, xhat, F, F_grad, F_hess)
    v = model.cov(t, S)
    M = v * S[..., :, None] * S[..., None, :]
    a = np.einsum("...kl,...ki,...lj->...ij", M, J, J)
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    b = 0.5 * np.einsum("...kl,...jkl->...j", M, H)
    r = model.r(t, S)
    b[..., 0] += (np.asarray(F_t, dtype=float) / F) * x1 + r * x1
    return TransformedCoefficients(a=a, b=b, c=-r)


def transformed_coefficients(model: MarketModel, F: "BoundarySurface", p: TransformedPoint) -> TransformedCoefficients:
    """Coefficients of the transformed operator at one point, reading ``F`` and its derivatives from the surface."""
    val, grad, hess, ft = F.evaluate(p.t, p.xhat)
    return transformed_coefficients_arrays(model, p.t, p.x1, p.xhat, val, grad, hess, ft)


def apply_transformed_operator(coef: TransformedCoefficients, value, grad, hess):
    """``0.5 a:D2u + b.Du + c u`` given derivatives in the scaled coordinates."""
    return (0.5 * np.einsum("...ij,...ij->...", coef.a, hess) + np.einsum("...i,...i->...", coef.b, grad)
            + coef.c * value)


def initial_data(x1, F0, K, literal=False):
    """Value at maturity in scaled coordinates, ``max(K - x1 * F(0), 0)``.

    ``literal=True`` gives the ablation ``max(K - x1, 0)``.
    """
    x1 = np.asarray(x1, dtype=float)
    if literal:
        return np.maximum(K - x1, 0.0)
    return np.maximum(K - x1 * np.asarray(F0, dtype=float), 0.0)


# additive log-ratio angle coordinates

def zeta_from_xhat(xhat):
    xhat = np.asarray(xhat, dtype=float)
    rest = 1.0 - xhat.sum(axis=-1, keepdims=True)
    return np.log(xhat) - np.log(rest)


def xhat_from_zeta(zeta):
    zeta = np.asarray(zeta, dtype=float)
    m = np.maximum(zeta.max(axis=-1, keepdims=True), 0.0) if zeta.shape[-1] else np.zeros(zeta.shape[:-1] + (1,))
    e = np.exp(zeta - m)
    return e / (np.exp(-m) + e.sum(axis=-1, keepdims=True))


def zeta_derivatives(xhat):
    """``D[..., m, j] = dzeta_m/dx_j`` and ``D2[..., m, j, l]``."""
    xhat = np.asarray(xhat, dtype=float)
    d = xhat.shape[-1]
    rest = 1.0 - xhat.sum(axis=-1)
    eye = np.eye(d)
    D = eye / xhat[..., :, None] + (1.0 / rest)[..., None, None]
    D2 = np.broadcast_to((1.0 / rest**2)[..., None, None, None], xhat.shape[:-1] + (d, d, d)).copy()
    for m in range(d):
        D2[..., m, m, m] -= 1.0 / xhat[..., m] ** 2
    return D, D2


def log_coordinate_coefficients(a, b, x1, xhat):
    """Itô map of scaled-coordinate coefficients to ``(z, zeta) = (ln x1, ln(x_j/x_0))``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    xhat = np.asarray(xhat, dtype=float)
    d = xhat.shape[-1]
    n = d + 1
    G = np.zeros(x1.shape + (n, n))
    G2 = np.zeros(x1.shape + (n, n, n))
    G[..., 0, 0] = 1.0 / x1
    G2[..., 0, 0, 0] = -1.0 / x1**2
    if d:
        D, D2 = zeta_derivatives(xhat)
        G[..., 1:, 1:] = D
        G2[..., 1:, 1:, 1:] = D2
    A = np.einsum("...mi,...ij,...pj->...mp", G, a, G)
    A = 0.5 * (A + np.swapaxes(A, -1, -2))
    B = np.einsum("...mi,...i->...m", G, b) + 0.5 * np.einsum("...ij,...mij->...m", a, G2)
    return A, B


def simplex_zeta_range(margin: float = SIMPLEX_MARGIN) -> float:
    """Half-width ``L`` of the angle grid so that ``x_j`` stays in ``[margin, 1 - margin]`` for two assets."""
    return float(np.log((1.0 - margin) / margin))


def angle_axes(d: int, nodes: int, margin: float = SIMPLEX_MARGIN, half_width: Optional[float] = None):
    if d == 0:
        return ()
    L = simplex_zeta_range(margin) if half_width is None else float(half_width)
    return tuple(np.linspace(-L, L, nodes) for _ in range(d))


# boundary surface

def _spline_derivs(values, axes, lead=1):
    """Gradient and Hessian of a tensor spline interpolant at its own nodes."""
    d = len(axes)
    shape = values.shape
    grad = np.zeros(shape + (d,))
    hess = np.zeros(shape + (d, d))
    for m, ax in enumerate(axes):
        sp = CubicSpline(ax, values, axis=lead + m)
        grad[..., m] = sp(ax, 1)
        hess[..., m, m] = sp(ax, 2)
        for p in range(m + 1, d):
            mixed = CubicSpline(axes[p], grad[..., m], axis=lead + p)(axes[p], 1)
            hess[..., m, p] = mixed
            hess[..., p, m] = mixed
    return grad, hess


def zeta_to_xhat_derivatives(xhat, grad_z, hess_z):
    """Convert derivatives with respect to ``zeta`` into derivatives with respect to ``xhat``."""
    D, D2 = zeta_derivatives(xhat)
    grad_x = np.einsum("...m,...mj->...j", grad_z, D)
    hess_x = np.einsum("...mp,...mj,...pl->...jl", hess_z, D, D) + np.einsum("...m,...mjl->...jl", grad_z, D2)
    return grad_x, hess_x


@dataclass
class BoundarySurface:
    """Boundary ``F(t, xhat)`` on a time grid times a tensor grid of log-ratio angles.

    Arrays are shaped ``(Nt+1, m_1, ..., m_d)`` with ``d = n - 1``; for a
    single asset the angle part is empty. ``grad`` and ``hess`` are derivatives
    with respect to the simplex angles ``x_2..x_n``; ``grad_zeta`` and
    ``hess_zeta`` are the same fields in log-ratio coordinates.
    """

    t: np.ndarray
    zeta_axes: tuple
    values: np.ndarray
    F_t: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    grad_zeta: np.ndarray
    hess_zeta: np.ndarray
    interp: str = "cubic"
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_values(cls, t, zeta_axes: Sequence[np.ndarray], values, F_t=None, interp="cubic", meta=None):
        t = np.asarray(t, dtype=float)
        zeta_axes = tuple(np.asarray(a, dtype=float) for a in zeta_axes)
        values = np.asarray(values, dtype=float)
        d = len(zeta_axes)
        if values.shape != (len(t),) + tuple(len(a) for a in zeta_axes):
            raise DomainError(f"values shape {values.shape} does not match grids")
        if F_t is None:
            F_t = time_derivative(t, values)
        if d:
            grad_z, hess_z = _spline_derivs(values, zeta_axes)
            xh = xhat_from_zeta(cls._zeta_nodes(zeta_axes))
            grad_x, hess_x = zeta_to_xhat_derivatives(xh, grad_z, hess_z)
        else:
            grad_z = grad_x = np.zeros(values.shape + (0,))
            hess_z = hess_x = np.zeros(values.shape + (0, 0))
        return cls(t=t, zeta_axes=zeta_axes, values=values, F_t=np.asarray(F_t, dtype=float),
                   grad=grad_x, hess=hess_x, grad_zeta=grad_z, hess_zeta=hess_z, interp=interp,
                   meta=dict(meta or {}))

    @staticmethod
    def _zeta_nodes(axes):
        if not axes:
            return np.zeros((0,))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh, axis=-1)

    @property
    def d(self) -> int:
        return len(self.zeta_axes)

    @property
    def n(self) -> int:
        return self.d + 1

    def zeta_nodes(self):
        return self._zeta_nodes(self.zeta_axes)

    def xhat_nodes(self):
        if not self.d:
            return np.zeros((0,))
        return xhat_from_zeta(self.zeta_nodes())

    def _time_slice(self, arr, t):
        """Piecewise linear in sqrt(t), matching the solver's time basis."""
        s = np.sqrt(np.clip(t, self.t[0], self.t[-1]))
        sq = np.sqrt(self.t)
        k = int(np.clip(np.searchsorted(sq, s, side="right") - 1, 0, len(sq) - 2)) if len(sq) > 1 else 0
        if len(sq) == 1:
            return arr[0]
        w = (s - sq[k]) / (sq[k + 1] - sq[k])
        return (1.0 - w) * arr[k] + w * arr[k + 1]

    def evaluate(self, t: float, xhat):
        """Value, angle gradient, angle Hessian and time derivative at ``(t, xhat)``."""
        xhat = np.asarray(xhat, dtype=float)
        val = self._time_slice(self.values, t)
        ft = self._time_slice(self.F_t, t)
        if not self.d:
            return float(val), np.zeros(0), np.zeros((0, 0)), float(ft)
        zeta = zeta_from_xhat(xhat)
        v, gz, hz = _tensor_spline_eval(self.zeta_axes, val, zeta, self.interp)
        f_t, _, _ = _tensor_spline_eval(self.zeta_axes, ft, zeta, self.interp, derivs=False)
        gx, hx = zeta_to_xhat_derivatives(xhat, gz, hz)
        return v, gx, hx, f_t

    def check(self, K: float, tol: float = 0.0) -> dict:
        """Counts of nodes violating ``0 < F <= K`` and the maturity pin ``F(0) = K``."""
        return {
            "nonpositive": int(np.sum(self.values <= 0)),
            "above_strike": int(np.sum(self.values > K * (1 + tol))),
            "maturity_mismatch": float(np.max(np.abs(self.values[0] - K))),
        }

    # serialisation

    def csv_columns(self):
        d = self.d
        cols = ["t"] + [f"x{j + 2}" for j in range(d)] + ["F", "F_t"] + [f"F_{j + 2}" for j in range(d)]
        cols += [f"F_{j + 2}{l + 2}" for j in range(d) for l in range(j, d)]
        return cols

    def rows(self):
        d = self.d
        xh = self.xhat_nodes().reshape(-1, d) if d else np.zeros((1, 0))
        iu = np.triu_indices(d)
        out = []
        for k, tk in enumerate(self.t):
            vals = np.reshape(self.values[k], -1)
            ft = np.reshape(self.F_t[k], -1)
            g = np.reshape(self.grad[k], (len(vals), d))
            h = np.reshape(self.hess[k], (len(vals), d, d))
            order = np.lexsort(xh.T[::-1]) if d else np.arange(1)
            for i in order:
                out.append([tk, *xh[i], vals[i], ft[i], *g[i], *h[i][iu]])
        return out

    def to_csv(self, path, header: Optional[dict] = None):
        with open(path, "w", newline="") as fh:
            for key, val in (header or {}).items():
                fh.write(f"# {key}={val}\n")
            w = csv.writer(fh)
            w.writerow(self.csv_columns())
            for row in self.rows():
                w.writerow([repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        reader = csv.reader(lines)
        cols = next(reader)
        data = np.array([[float(x) for x in row] for row in reader])
        d = sum(1 for c in cols if c.startswith("x"))
        t = np.unique(data[:, 0])
        if d == 0:
            return cls.from_values(t, (), data[:, 1 + d], F_t=data[:, 2 + d])
        zeta = zeta_from_xhat(data[:, 1:1 + d])
        axes = tuple(np.unique(np.round(zeta[:, m], 10)) for m in range(d))
        shape = (len(t),) + tuple(len(a) for a in axes)
        idx = [np.searchsorted(t, data[:, 0])] + [np.searchsorted(axes[m], np.round(zeta[:, m], 10)) for m in range(d)]
        vals = np.zeros(shape)
        ft = np.zeros(shape)
        vals[tuple(idx)] = data[:, 1 + d]
        ft[tuple(idx)] = data[:, 2 + d]
        return cls.from_values(t, axes, vals, F_t=ft)


def time_derivative(t, values):
    """Derivative along axis 0 of a field that is piecewise linear in sqrt(t)."""
    t = np.asarray(t, dtype=float)
    if len(t) < 2:
        return np.zeros_like(values)
    sq = np.sqrt(t)
    dv = np.diff(values, axis=0)
    slope = dv / np.diff(sq).reshape((-1,) + (1,) * (values.ndim - 1))
    # centre the sqrt-slope at nodes, then d/dt = d/dsqrt(t) / (2 sqrt t)
    node = np.empty_like(values)
    node[0] = slope[0]
    node[-1] = slope[-1]
    node[1:-1] = 0.5 * (slope[1:] + slope[:-1])
    with np.errstate(divide="ignore", invalid="ignore"):
        out = node / (2.0 * sq.reshape((-1,) + (1,) * (values.ndim - 1)))
    out[0] = out[1] if len(t) > 1 else 0.0
    return out


def _tensor_spline_eval(axes, values, zeta, interp="cubic", derivs=True):
    """Evaluate a tensor interpolant (cubic or linear) with gradient and Hessian at scattered points."""
    zeta = np.atleast_2d(np.asarray(zeta, dtype=float))
    single = np.ndim(zeta) == 2 and zeta.shape[0] == 1
    d = len(axes)
    out_v = np.zeros(len(zeta))
    out_g = np.zeros((len(zeta), d))
    out_h = np.zeros((len(zeta), d, d))
    for p, z in enumerate(zeta):
        out_v[p], out_g[p], out_h[p] = _tensor_point(axes, values, z, interp, derivs)
    if single:
        return out_v[0], out_g[0], out_h[0]
    return out_v, out_g, out_h


def _tensor_point(axes, values, z, interp, derivs):
    d = len(axes)
    # reduce one axis at a time; track derivative orders along each axis
    cube = {(): values}
    for m in range(d):
        nxt = {}
        for key, arr in cube.items():
            ax = axes[m]
            zm = np.clip(z[m], ax[0], ax[-1])
            if interp == "cubic":
                sp = CubicSpline(ax, arr, axis=0)
                orders = (0, 1, 2) if derivs else (0,)
                for o in orders:
                    if sum(key) + o <= 2:
                        nxt[key + (o,)] = sp(zm, o)
            else:
                i = int(np.clip(np.searchsorted(ax, zm) - 1, 0, len(ax) - 2))
                w = (zm - ax[i]) / (ax[i + 1] - ax[i])
                nxt[key + (0,)] = (1 - w) * arr[i] + w * arr[i + 1]
                if derivs and sum(key) < 2:
                    nxt[key + (1,)] = (arr[i + 1] - arr[i]) / (ax[i + 1] - ax[i])
        cube = nxt
    val = float(cube[(0,) * d])
    g = np.zeros(d)
    h = np.zeros((d, d))
    if derivs:
        for m in range(d):
            e = [0] * d
            e[m] = 1
            g[m] = float(cube.get(tuple(e), 0.0))
            e[m] = 2
            h[m, m] = float(cube.get(tuple(e), 0.0))
            for p in range(m + 1, d):
                e = [0] * d
                e[m] = e[p] = 1
                h[m, p] = h[p, m] = float(cube.get(tuple(e), 0.0))
    return val, g, h
