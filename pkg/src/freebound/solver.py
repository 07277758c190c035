"""Fixed-point iteration for the exercise boundary of an American basket put.

Each iterate ``F`` defines a transformed diffusion whose boundary density
``phi`` solves a Volterra equation on the hyperplane; the value on the
hyperplane then yields the next boundary ``F = K - u(t, 1, xhat)``.

Layout of the computation:

* time nodes are uniform in ``sqrt(t)`` and all time fields are piecewise
  linear in ``sqrt(t)``;
* the angle grid is a tensor grid in log-ratio coordinates ``zeta``;
* the density is written in ``(z, zeta) = (ln x1, zeta)``; its coefficients
  come from the transformed coefficients through an Itô change of variables
  and are tabulated on a refined angle grid at every time node;
* the time derivative of ``F`` enters the drift only through
  ``ln F(t) - ln F(tau)``, which is integrated exactly over each pair;
* iterations march over substeps of the time axis (blocks). Inside a block
  the map is applied as a Jacobi sweep: the surface is held fixed while
  ``phi`` is marched over the block, then replaced in one step.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline

from . import frontfix, kernels, quad, volterra, wkb
from .errors import ClampError, DivergenceError, DomainError, StageError
from .frontfix import BoundarySurface
from .model import MarketModel, ellipticity_bounds, working_samples

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverConfig:
    """Numerical settings of the boundary iteration.

    ``eps`` is the absolute tolerance (currency units) of the stopping rule
    on the discrete norm of successive boundary differences.
    """

    mode: str = "u"
    eps: float = 1e-3
    max_iter: int = 100
    rho_factor: float = 0.0125
    growth: float = 1.3
    order: int = 1
    policy: str = "midpoint-frozen"
    seed_value: Optional[float] = None
    literal_initial: bool = False
    kernel_sign: float = -1.0
    n_time: int = 64
    n_angle: int = 33
    angle_margin: float = frontfix.SIMPLEX_MARGIN
    fine_factor: int = 4
    n_sigma: int = 8
    first_panel_nodes: int = 24
    clamp_fraction: float = 0.01
    divergence_window: int = 3
    relax: float = 1.0
    z_max: float = 3.0
    greeks: bool = True
    v_levels: int = 24
    fit_stride: int = 1
    curvature_filter: bool = True

    def __post_init__(self):
        if self.mode not in ("u", "v"):
            raise DomainError(f"mode must be 'u' or 'v', got {self.mode!r}")
        if not self.eps > 0:
            raise DomainError("eps must be positive")
        if not 0 < self.rho_factor <= 1:
            raise DomainError("rho_factor must lie in (0, 1]")
        if self.order not in (0, 1, 2):
            raise DomainError("WKB order must be 0, 1 or 2")
        if self.policy not in wkb.POLICIES:
            raise DomainError(f"unknown freeze policy {self.policy!r}")
        if self.n_time < 2:
            raise DomainError("need at least two time intervals")


def substep_schedule(T: float, rho_factor: float, growth: float = 1.3, T_unit: Optional[float] = None):
    """Graded partition of ``[0, T]``: first length ``rho_factor * T_unit``, then growing by ``growth``.

    A final piece shorter than a third of its predecessor is merged into it.
    """
    if not 0 < rho_factor <= 1:
        raise DomainError("rho_factor must lie in (0, 1]")
    unit = T if T_unit is None else T_unit
    h = rho_factor * unit
    edges = [0.0]
    while edges[-1] + h < T * (1 - 1e-12):
        edges.append(edges[-1] + h)
        h *= growth
    if len(edges) > 1 and T - edges[-1] < (edges[-1] - edges[-2]) / 3:
        edges[-1] = T
    else:
        edges.append(T)
    return [(a, b) for a, b in zip(edges[:-1], edges[1:])]


@dataclass(frozen=True)
class SolverGrid:
    t: np.ndarray
    zeta_axes: tuple
    fine_axes: tuple

    @classmethod
    def build(cls, T: float, n_time: int, d: int, n_angle: int = 33, margin: float = frontfix.SIMPLEX_MARGIN,
              fine_factor: int = 4):
        t = T * (np.arange(n_time + 1) / n_time) ** 2
        axes = frontfix.angle_axes(d, n_angle, margin)
        fine = tuple(np.linspace(a[0], a[-1], (len(a) - 1) * fine_factor + 1) for a in axes)
        return cls(t=t, zeta_axes=axes, fine_axes=fine)

    @property
    def d(self):
        return len(self.zeta_axes)

    @property
    def shape(self):
        return tuple(len(a) for a in self.zeta_axes)

    @property
    def m(self):
        return int(np.prod(self.shape)) if self.d else 1

    def nodes(self):
        if not self.d:
            return np.zeros((1, 0))
        return np.stack(np.meshgrid(*self.zeta_axes, indexing="ij"), axis=-1).reshape(-1, self.d)

    def blocks(self, schedule):
        out = []
        for a, b in schedule:
            idx = np.nonzero((self.t > a + 1e-15) & (self.t <= b + 1e-15))[0]
            if len(idx):
                out.append((int(idx[0]), int(idx[-1])))
        return out


def discrete_norm(dF) -> float:
    """``sup|dF| + sup|first differences| + sup|second differences|`` over every axis."""
    dF = np.asarray(dF, dtype=float)
    total = float(np.max(np.abs(dF))) if dF.size else 0.0
    first = 0.0
    second = 0.0
    for ax in range(dF.ndim):
        if dF.shape[ax] > 1:
            first = max(first, float(np.max(np.abs(np.diff(dF, axis=ax)))))
        if dF.shape[ax] > 2:
            second = max(second, float(np.max(np.abs(np.diff(dF, n=2, axis=ax)))))
    return total + first + second


@dataclass(frozen=True)
class DiscreteNorm:
    value: float
    sup: float

    @classmethod
    def of(cls, dF):
        return cls(value=discrete_norm(dF), sup=float(np.max(np.abs(dF))) if np.size(dF) else 0.0)


# coefficient tables

def _tensor_fields(values, axes, pts_axes):
    """Value, gradient and Hessian of the tensor cubic interpolant of ``values`` on the tensor grid ``pts_axes``."""
    d = len(axes)
    if d == 0:
        return np.asarray(values, float), np.zeros(np.shape(values) + (0,)), np.zeros(np.shape(values) + (0, 0))
    # derivative orders along each axis up to total 2
    cache = {(): np.asarray(values, float)}
    for m in range(d):
        nxt = {}
        for key, arr in cache.items():
            sp = CubicSpline(axes[m], arr, axis=m)
            for o in range(0, 3 - sum(key)):
                nxt[key + (o,)] = sp(pts_axes[m], o)
        cache = nxt
    val = cache[(0,) * d]
    grad = np.zeros(val.shape + (d,))
    hess = np.zeros(val.shape + (d, d))
    for m in range(d):
        e = [0] * d
        e[m] = 1
        grad[..., m] = cache[tuple(e)]
        e[m] = 2
        hess[..., m, m] = cache[tuple(e)]
        for p in range(m + 1, d):
            e = [0] * d
            e[m] = e[p] = 1
            hess[..., m, p] = hess[..., p, m] = cache[tuple(e)]
    return val, grad, hess


def _binomial_filter(arr, axes):
    """``[1, 2, 1] / 4`` along each listed axis, end values kept."""
    out = np.array(arr, dtype=float)
    for ax in axes:
        if out.shape[ax] < 3:
            continue
        mid = [slice(None)] * out.ndim
        lo = list(mid)
        hi = list(mid)
        mid[ax] = slice(1, -1)
        lo[ax] = slice(0, -2)
        hi[ax] = slice(2, None)
        smoothed = out.copy()
        smoothed[tuple(mid)] = 0.25 * out[tuple(lo)] + 0.5 * out[tuple(mid)] + 0.25 * out[tuple(hi)]
        out = smoothed
    return out


class CoefficientTable:
    """Log-coordinate coefficients at ``z = 0`` on (time nodes) x (refined angle grid).

    With ``curvature_filter`` the angle Hessian of ``F`` that enters the
    coefficients is taken from node values smoothed by a ``[1, 2, 1]``
    filter: the raw spline curvature feeds an odd-even angle mode back into
    the next iterate with a gain growing like ``1 / h**2``.
    """

    def __init__(self, model: MarketModel, grid: SolverGrid, curvature_filter: bool = True):
        self.model = model
        self.grid = grid
        self.curvature_filter = curvature_filter
        n = model.n
        fshape = tuple(len(a) for a in grid.fine_axes) if grid.d else (1,)
        nt = len(grid.t)
        self.A = np.zeros((nt,) + fshape + (n, n))
        self.B = np.zeros((nt,) + fshape + (n,))
        self.r = np.zeros((nt,) + fshape)
        self.lnF = np.zeros((nt,) + fshape)
        self.Ft_over_F = np.zeros((nt,) + fshape)
        if grid.d:
            mesh = np.stack(np.meshgrid(*grid.fine_axes, indexing="ij"), axis=-1)
            self.xhat = frontfix.xhat_from_zeta(mesh)
        else:
            self.xhat = np.zeros(fshape + (0,))
        self.h = np.array([a[1] - a[0] for a in grid.fine_axes]) if grid.d else np.zeros(0)
        self.lo = np.array([a[0] for a in grid.fine_axes]) if grid.d else np.zeros(0)
        self.fshape = fshape

    def update_row(self, k: int, F_row, Ft_row=None):
        g = self.grid
        if g.d:
            val, gz, hz = _tensor_fields(F_row, g.zeta_axes, g.fine_axes)
            if self.curvature_filter:
                _, _, h_nodes = _tensor_fields(F_row, g.zeta_axes, g.zeta_axes)
                h_nodes = _binomial_filter(h_nodes, range(g.d))
                hz = _tensor_fields(h_nodes, g.zeta_axes, g.fine_axes)[0]
            if np.any(val <= 0):
                val = np.maximum(val, 1e-12 * self.model.K)
            gx, hx = frontfix.zeta_to_xhat_derivatives(self.xhat, gz, hz)
            ft = _tensor_fields(Ft_row, g.zeta_axes, g.fine_axes)[0] if Ft_row is not None else np.zeros_like(val)
        else:
            val = np.full(self.fshape, float(np.asarray(F_row).reshape(-1)[0]))
            gx = np.zeros(self.fshape + (0,))
            hx = np.zeros(self.fshape + (0, 0))
            ft = np.full(self.fshape, float(np.asarray(Ft_row).reshape(-1)[0])) if Ft_row is not None else np.zeros_like(val)
        x1 = np.ones(self.fshape)
        coef = frontfix.transformed_coefficients_arrays(self.model, g.t[k], x1, self.xhat, val, gx, hx, 0.0)
        A, B = frontfix.log_coordinate_coefficients(coef.a, coef.b, x1, self.xhat)
        self.A[k] = A
        self.B[k] = B
        self.r[k] = -coef.c
        self.lnF[k] = np.log(val)
        self.Ft_over_F[k] = ft / val

    def fill(self, F, Ft=None):
        for k in range(len(self.grid.t)):
            self.update_row(k, F[k], None if Ft is None else Ft[k])

    def _corners(self, zeta):
        """Multilinear corner indices and weights on the refined angle grid."""
        d = self.grid.d
        if d == 0:
            shape = zeta.shape[:-1]
            return [(np.zeros(shape, dtype=np.intp), np.ones(shape))]
        u = (zeta - self.lo) / self.h
        sizes = np.array(self.fshape)
        u = np.clip(u, 0.0, sizes - 1.0)
        i0 = np.minimum(np.floor(u).astype(np.intp), sizes - 2)
        f = u - i0
        out = []
        for corner in range(2 ** d):
            bits = [(corner >> m) & 1 for m in range(d)]
            flat = np.zeros(zeta.shape[:-1], dtype=np.intp)
            w = np.ones(zeta.shape[:-1])
            for m in range(d):
                flat = flat * sizes[m] + i0[..., m] + bits[m]
                w = w * (f[..., m] if bits[m] else 1.0 - f[..., m])
            out.append((flat, w))
        return out

    def lookup(self, arr, rows, row_w, corners):
        """Interpolate table ``arr`` at time rows ``rows`` / ``rows+1`` with weight ``row_w`` and angle corners."""
        nt = arr.shape[0]
        flat = arr.reshape((nt, -1) + arr.shape[1 + max(self.grid.d, 1):])
        out = 0.0
        for idx, w in corners:
            lo = flat[rows, idx]
            if row_w is None:
                val = lo
            else:
                hi = flat[np.minimum(rows + 1, nt - 1), idx]
                rw = row_w.reshape(row_w.shape + (1,) * (lo.ndim - row_w.ndim))
                val = (1.0 - rw) * lo + rw * hi
            ww = w.reshape(w.shape + (1,) * (val.ndim - w.ndim))
            out = out + ww * val
        return out

    def time_index(self, tq):
        sq = np.sqrt(self.grid.t)
        s = np.sqrt(np.clip(tq, 0.0, self.grid.t[-1]))
        i = np.clip(np.searchsorted(sq, s, side="right") - 1, 0, len(sq) - 2)
        w = (s - sq[i]) / (sq[i + 1] - sq[i])
        return i, w


CHANNELS = ("G", "Z", "Gz", "Gt", "Gzeta", "Gzz")


class HyperplaneKernel:
    """Frozen-Gaussian kernels between a target point and the hyperplane ``z = 0``.

    Channels: ``G`` (discounted density), ``Z`` (``dG/dz + sign * G``),
    ``Gz`` (``dG/dz``), ``Gt`` (time derivative at fixed lag through the
    ``ln F`` shift), ``Gzeta`` / ``Gzz`` (angle gradient and Hessian in the
    target, flattened).
    """

    def __init__(self, table: CoefficientTable, order: int, channels=("G", "Z"), sign: float = -1.0,
                 target_z: float = 0.0):
        self.table = table
        self.order = order
        self.channels = channels
        self.sign = sign
        self.target_z = target_z

    def _frozen(self, tk, k_row, targets, tn, zeta_m):
        """Coefficients and ln F shift at the time midpoint and angle ``zeta_m`` ``(P, T, Q, d)``."""
        tab = self.table
        P, T = zeta_m.shape[:2]
        tmid = 0.5 * (tk + tn.tau)
        ri, rw = tab.time_index(tmid)
        rows = np.broadcast_to(ri[None, :, None], zeta_m.shape[:-1])
        roww = np.broadcast_to(rw[None, :, None], zeta_m.shape[:-1])
        corners = tab._corners(zeta_m)
        A = tab.lookup(tab.A, rows, roww, corners)
        B = tab.lookup(tab.B, rows, roww, corners)
        r = tab.lookup(tab.r, rows, roww, corners)
        krow = np.full(zeta_m.shape[:-1], k_row, dtype=np.intp)
        lnF_t = tab.lookup(tab.lnF, krow, None, corners)
        left = np.broadcast_to(tn.left[None, :, None], zeta_m.shape[:-1])
        lnF_lo = tab.lookup(tab.lnF, left, None, corners)
        lnF_hi = tab.lookup(tab.lnF, left + 1, None, corners)
        h1 = tn.h1[None, :, None]
        lnF_tau = (1.0 - h1) * lnF_lo + h1 * lnF_hi
        out = dict(A=A, B=B, r=r, shift=lnF_t - lnF_tau)
        if "Gt" in self.channels:
            g_t = tab.lookup(tab.Ft_over_F, krow, None, corners)
            g_lo = tab.lookup(tab.Ft_over_F, left, None, corners)
            g_hi = tab.lookup(tab.Ft_over_F, left + 1, None, corners)
            out["dshift"] = g_t - ((1.0 - h1) * g_lo + h1 * g_hi)
        return out

    def place(self, tk, targets, tn):
        d = targets.shape[1] - 1
        P, T = len(targets), len(tn.tau)
        if d == 0:
            return np.zeros((P, T, 0)), np.zeros((P, T, 0, 0))
        zt = targets[:, None, None, 1:]
        k_row = self._k_row(tk)
        fz = self._frozen(tk, k_row, targets, tn, np.broadcast_to(zt, (P, T, 1, d)))
        A = fz["A"][:, :, 0]
        B = fz["B"][:, :, 0]
        delta = tn.delta[None, :]
        mz = B[..., 0] * delta + fz["shift"][:, :, 0]
        mzeta = B[..., 1:] * delta[..., None]
        azz = A[..., 0, 0]
        azq = A[..., 1:, 0]
        # condition on z = target_z at the source... source lies on z = 0, target at z_t
        dz = 0.0 - targets[:, None, 0] - mz
        centre = targets[:, None, 1:] + mzeta + azq / azz[..., None] * dz[..., None]
        S = (A[..., 1:, 1:] - azq[..., :, None] * azq[..., None, :] / azz[..., None, None]) * delta[..., None, None]
        L = np.linalg.cholesky(S)
        return centre, L

    def _k_row(self, tk):
        t = self.table.grid.t
        k = int(np.argmin(np.abs(t - tk)))
        if abs(t[k] - tk) > 1e-12 * max(1.0, tk):
            raise DomainError("kernel target time must be a grid node")
        return k

    def values(self, tk, targets, tn, eta):
        P, T, Q, d = eta.shape
        n = d + 1
        k_row = self._k_row(tk)
        zt = targets[:, None, None, :]
        zeta_m = 0.5 * (zt[..., 1:] + eta) if d else np.zeros((P, T, Q, 0))
        fz = self._frozen(tk, k_row, targets, tn, zeta_m)
        A, B, r = fz["A"], fz["B"], fz["r"]
        delta = tn.delta[None, :, None]
        b_eff = B.copy()
        b_eff[..., 0] += fz["shift"] / delta
        dx = np.concatenate([np.broadcast_to(-zt[..., :1], (P, T, Q, 1)), eta - zt[..., 1:]], axis=-1)
        if n == 1:
            a_inv = 1.0 / A
            logdet = np.log(A[..., 0, 0])
        elif n == 2:
            det = A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
            a_inv = np.stack([np.stack([A[..., 1, 1], -A[..., 0, 1]], -1),
                              np.stack([-A[..., 1, 0], A[..., 0, 0]], -1)], -2) / det[..., None, None]
            logdet = np.log(det)
        else:
            a_inv = np.linalg.inv(A)
            logdet = np.linalg.slogdet(A)[1]
        logp = wkb.frozen_log_density(dx, delta, a_inv, logdet, b_eff, self.order)
        G = np.exp(logp - r * delta)
        need_score = any(c in self.channels for c in ("Z", "Gz", "Gt", "Gzeta", "Gzz"))
        score = wkb.frozen_score(dx, delta, a_inv, b_eff) if need_score else None
        out = []
        for ch in self.channels:
            if ch == "G":
                out.append(G)
            elif ch == "Z":
                out.append(G * score[..., 0] + self.sign * G)
            elif ch == "Gz":
                out.append(G * score[..., 0])
            elif ch == "Gt":
                out.append(G * score[..., 0] * fz["dshift"])
            elif ch == "Gzeta":
                for m in range(d):
                    out.append(G * score[..., 1 + m])
            elif ch == "Gzz":
                for m in range(d):
                    for p in range(d):
                        out.append(G * (score[..., 1 + m] * score[..., 1 + p] - a_inv[..., 1 + m, 1 + p] / delta))
        return np.stack(out)


# iteration state

@dataclass
class IterationState:
    """Snapshot of the boundary iteration.

    ``F`` and ``phi`` are ``(Nt+1, M)`` on the flattened angle grid;
    ``block`` indexes the current substep, ``n`` the iteration inside it.
    """

    F: np.ndarray
    phi: np.ndarray
    block: int
    n: int
    blocks: list
    residuals: list = field(default_factory=list)
    sup_residuals: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    clamps: list = field(default_factory=list)
    history: list = field(default_factory=list)
    converged_blocks: int = 0
    sweeps: int = 0
    timings: dict = field(default_factory=dict)
    u_boundary: Optional[np.ndarray] = None
    U: Optional[np.ndarray] = None
    phi_v: Optional[np.ndarray] = None

    @property
    def k_hat(self):
        return self.ratios[-1] if self.ratios else None

    def to_json(self):
        return {
            "block": self.block, "n": self.n, "blocks": [list(b) for b in self.blocks],
            "F": self.F.tolist(), "phi": self.phi.tolist(), "history": self.history,
            "sweeps": self.sweeps, "converged_blocks": self.converged_blocks,
        }

    @classmethod
    def from_json(cls, data: dict):
        return cls(F=np.asarray(data["F"], dtype=float), phi=np.asarray(data["phi"], dtype=float),
                   block=int(data["block"]), n=int(data["n"]), blocks=[tuple(b) for b in data["blocks"]],
                   history=list(data.get("history", [])), sweeps=int(data.get("sweeps", 0)),
                   converged_blocks=int(data.get("converged_blocks", 0)))


class BoundarySolver:
    """Holds the model, grids and tables for one solve; the public functions below drive it."""

    def __init__(self, model: MarketModel, grid: SolverGrid, config: SolverConfig,
                 rule: Optional[quad.QuadratureRule] = None):
        if model.n - 1 != grid.d:
            raise DomainError(f"grid has {grid.d} angle axes, model needs {model.n - 1}")
        self.model = model
        self.grid = grid
        self.config = config
        self.rule = rule or quad.QuadratureRule.for_dimension(model.n)
        self.K = model.K
        self.table = CoefficientTable(model, grid, config.curvature_filter)
        self.targets = np.concatenate([np.zeros((grid.m, 1)), grid.nodes()], axis=1)
        self.unit = quad.unit_nodes(grid.d, self.rule)
        self.schedule = substep_schedule(model.T, config.rho_factor, config.growth)
        self.blocks = grid.blocks(self.schedule)
        self._kernel = HyperplaneKernel(self.table, config.order, ("G", "Z"), config.kernel_sign)
        if config.mode == "v" and grid.d:
            raise DomainError("v-mode is implemented for a single asset")

    # single-node map
    def jump(self, k):
        """Coefficient of ``phi`` on the left of the boundary equation, ``1 / A_zz``."""
        idx = self.table._corners(self.targets[None, :, 1:])
        A = self.table.lookup(self.table.A, np.full((1, self.grid.m), k, dtype=np.intp), None, idx)
        return 1.0 / A[0, :, 0, 0]

    def initial_terms(self, k):
        """Initial-data contributions ``(u1, Gamma_integral)`` at time node ``k``.

        Zero whenever the transformed payoff vanishes on ``z >= 0``, which is
        the case for the default initial data with ``F(0) = K``.
        """
        m = self.grid.m
        if self.config.literal_initial:
            z_hi = np.log(self.K)
        else:
            F0 = self.F0_max
            z_hi = np.log(self.K / F0) if F0 < self.K else 0.0
        if z_hi <= 0 or k == 0:
            return np.zeros(m), np.zeros(m)
        return self._initial_quadrature(k, min(z_hi, self.config.z_max + np.log(self.K)))

    def _initial_quadrature(self, k, z_hi):
        tk = self.grid.t[k]
        nodes = self.rule.nodes
        zg, zw = np.polynomial.legendre.leggauss(2 * nodes)
        zs = 0.5 * z_hi * (zg + 1)
        zw = 0.5 * z_hi * zw
        u1 = np.zeros(self.grid.m)
        gam = np.zeros(self.grid.m)
        d = self.grid.d
        tab = self.table
        for i, tgt in enumerate(self.targets):
            # frozen at the time midpoint tk/2 and the target angle (initial data are smooth in the angle)
            corners = tab._corners(tgt[None, 1:])
            ri, rw = tab.time_index(np.array([0.5 * tk]))
            A = tab.lookup(tab.A, ri, rw, corners)[0]
            B = tab.lookup(tab.B, ri, rw, corners)[0]
            r = float(tab.lookup(tab.r, ri, rw, corners)[0])
            shift = float(tab.lookup(tab.lnF, np.array([k]), None, corners)[0] - tab.lookup(tab.lnF, np.array([0]), None, corners)[0])
            b_eff = B.copy()
            b_eff[0] += shift / tk
            dens = wkb.WkbDensity(A, b_eff, self.model.n, order=self.config.order)
            if d:
                mean, cov = dens.moments(tk, tgt, 0.0)
                sd = np.sqrt(np.diag(cov))[1:]
                eta, ew = quad.gauss_legendre_box(mean[1:] - self.rule.half_width * sd, mean[1:] + self.rule.half_width * sd, nodes)
            else:
                eta, ew = np.zeros((1, 0)), np.ones(1)
            Y = np.concatenate([np.repeat(zs, len(eta))[:, None], np.tile(eta, (len(zs), 1))], axis=1)
            W = np.repeat(zw, len(eta)) * np.tile(ew, len(zs))
            der = dens.density_derivatives(np.full(len(Y), tk), np.broadcast_to(tgt, Y.shape), np.zeros(len(Y)), Y)
            if self.config.literal_initial:
                psi = np.maximum(self.K - np.exp(Y[:, 0]), 0.0)
            else:
                lnF0 = tab.lookup(tab.lnF, np.zeros(len(Y), dtype=np.intp), None, tab._corners(Y[:, 1:]))
                psi = np.maximum(self.K - np.exp(Y[:, 0] + lnF0), 0.0)
            disc = np.exp(-r * tk)
            u1[i] = disc * np.dot(W, der.p * psi)
            gam[i] = disc * np.dot(W, (der.dx1 + self.config.kernel_sign * der.p) * psi)
        return u1, gam

    def node_weights(self, k, channels=None, kernel=None, targets=None, n_sigma=None):
        kern = kernel or (self._kernel if channels is None else
                          HyperplaneKernel(self.table, self.config.order, channels, self.config.kernel_sign))
        W, tn = quad.boundary_weights(kern, self.grid.t, k, self.grid.zeta_axes,
                                      self.targets if targets is None else targets, self.rule,
                                      n_sigma=n_sigma or self.config.n_sigma, basis="sqrt",
                                      first_panel_nodes=self.config.first_panel_nodes, unit=self.unit)
        return W, tn

    def update_node(self, k, F, phi, gamma_extra=None):
        """One application of the boundary map at time node ``k``; returns ``(phi_k, F_k, u_k)``."""
        W, _ = self.node_weights(k)
        WG, WZ = W[0], W[1]
        u1, g_int = self.initial_terms(k)
        gam = self.K + g_int
        if gamma_extra is not None:
            gam = gam + gamma_extra
        phi_k = volterra.march_step(WZ, gam, phi, self.jump(k), k)
        phi_full = phi[:k + 1].copy()
        phi_full[k] = phi_k
        u = np.einsum("ijm,jm->i", WG, phi_full) + u1
        return phi_k, self.K - u, u

    def update_node_v(self, k, state: IterationState, direct: bool = False):
        """Boundary map at node ``k`` through ``v = t u`` (single asset).

        The current surface gives ``u`` on the hyperplane and on interior
        levels; that ``u`` is the source of the ``v`` problem whose
        hyperplane value yields ``F = K - v / t``. With ``direct`` the
        ``v`` rows are still recorded but ``F`` comes from ``u``.
        """
        phi_k, F_u, _ = self.update_node(k, state.F, state.phi)
        state.phi[k] = phi_k
        zs, _ = self.v_nodes
        state.U[k] = value_at(self, state, k, zs)[0, :, 0]
        phi_v_k, v = v_node(self, k, state.U, state.phi_v)
        state.phi_v[k] = phi_v_k
        if direct:
            return phi_k, F_u
        return phi_k, self.K - v / self.grid.t[k]

    @property
    def v_nodes(self):
        zg, zw = np.polynomial.legendre.leggauss(self.config.v_levels)
        half = 0.5 * self.config.z_max
        return half * (zg + 1), half * zw

    def seed(self):
        seed = self.K if self.config.seed_value is None else float(self.config.seed_value)
        F = np.full((len(self.grid.t), self.grid.m), seed)
        F[0] = self.K
        return F

    @property
    def F0_max(self):
        return float(np.exp(self.table.lnF[0].max()))

    def sweep(self, state: IterationState, k0: int, k1: int):
        """One application of the boundary map on nodes ``k0..k1``; returns the change of ``F`` and clamp count.

        The surface is held fixed during the pass and replaced at the end;
        ``phi`` is marched exactly for the held surface. (Updating ``F`` node
        by node makes the residuals erratic: the map couples each node
        strongly to its predecessor.)
        """
        F_old = state.F[k0:k1 + 1].copy()
        F_next = F_old.copy()
        clamps = 0
        lo = 1e-6 * self.K
        for k in range(k0, k1 + 1):
            if self.config.mode == "v":
                # dividing by t amplifies errors on the first substep, where u is used directly
                phi_k, F_new = self.update_node_v(k, state, direct=k0 == 1)
            else:
                phi_k, F_new, _ = self.update_node(k, state.F, state.phi)
            F_new = state.F[k] + self.config.relax * (F_new - state.F[k])
            bad = (F_new <= 0) | (F_new > self.K) | ~np.isfinite(F_new)
            if bad.any():
                clamps += int(bad.sum())
                F_new = np.where(np.isfinite(F_new), np.clip(F_new, lo, self.K), self.K)
            state.phi[k] = phi_k
            F_next[k - k0] = F_new
        state.F[k0:k1 + 1] = F_next
        for k in range(k0, k1 + 1):
            self.table.update_row(k, state.F[k].reshape(self.grid.shape or (1,)))
        return state.F[k0:k1 + 1] - F_old, clamps

    def extrapolate(self, state: IterationState, k0: int, k1: int):
        """Initial guess for a new block: linear in ``sqrt(t)`` from the last two converged nodes."""
        if k0 < 3:
            return
        sq = np.sqrt(self.grid.t)
        a, b = state.F[k0 - 2], state.F[k0 - 1]
        for k in range(k0, k1 + 1):
            w = (sq[k] - sq[k0 - 1]) / (sq[k0 - 1] - sq[k0 - 2])
            state.F[k] = np.clip(b + w * (b - a), 1e-6 * self.K, self.K)
            state.phi[k] = state.phi[k0 - 1]
            self.table.update_row(k, state.F[k].reshape(self.grid.shape or (1,)))


def _check_model(model: MarketModel):
    try:
        lam, Lam = ellipticity_bounds(model, working_samples(model))
    except Exception as exc:  # the gate refuses any run on a degenerate model
        raise StageError("ellipticity", exc) from exc
    return lam, Lam


def make_solver(model: MarketModel, grid: Optional[SolverGrid] = None, config: Optional[SolverConfig] = None,
                rule: Optional[quad.QuadratureRule] = None) -> BoundarySolver:
    config = config or SolverConfig()
    _check_model(model)
    if grid is None:
        grid = SolverGrid.build(model.T, config.n_time, model.n - 1, config.n_angle, config.angle_margin,
                                config.fine_factor)
    return BoundarySolver(model, grid, config, rule)


def step1_init(model: MarketModel, grid: Optional[SolverGrid] = None, config: Optional[SolverConfig] = None,
               rule: Optional[quad.QuadratureRule] = None, solver: Optional[BoundarySolver] = None):
    """Seed ``F`` and apply the boundary map once on the first substep.

    Returns ``(solver, state)``. The seed is ``F = K`` unless
    ``config.seed_value`` says otherwise; ``F(0) = K`` is always pinned.
    """
    t0 = time.perf_counter()
    solver = solver or make_solver(model, grid, config, rule)
    cfg = solver.config
    F = solver.seed()
    phi = np.zeros_like(F)
    try:
        solver.table.fill(F.reshape((len(F),) + (solver.grid.shape or (1,))))
        phi[0] = solver.K / solver.jump(0)
    except Exception as exc:
        raise StageError("coefficients", exc) from exc
    state = IterationState(F=F, phi=phi, block=0, n=0, blocks=solver.blocks)
    if cfg.mode == "v":
        state.U = np.zeros((len(F), len(solver.v_nodes[0])))
        state.phi_v = np.zeros_like(F)
    state = _apply(solver, state)
    state.timings["init"] = time.perf_counter() - t0
    return solver, state


def _apply(solver: BoundarySolver, state: IterationState):
    k0, k1 = state.blocks[state.block]
    try:
        dF, clamps = solver.sweep(state, k0, k1)
    except volterra.VolterraConditionError:
        raise
    except Exception as exc:
        raise StageError("update", exc) from exc
    nodes = dF.size
    if clamps:
        logger.warning("clamped %d of %d boundary nodes into (0, K]", clamps, nodes)
    if clamps > solver.config.clamp_fraction * nodes:
        raise ClampError(f"{clamps} of {nodes} nodes left (0, K] in block {state.block}")
    norm = DiscreteNorm.of(dF.reshape((dF.shape[0],) + (solver.grid.shape or ())))
    prev = state.residuals[-1] if state.n > 0 and state.residuals else None
    state.n += 1
    state.sweeps += 1
    state.residuals.append(norm.value)
    state.sup_residuals.append(norm.sup)
    state.clamps.append(clamps)
    if prev is not None and prev > 0:
        state.ratios.append(norm.value / prev)
    state.history.append({"block": state.block, "iteration": state.n, "residual": norm.value,
                          "sup_residual": norm.sup, "ratio": state.ratios[-1] if prev else None,
                          "clamps": clamps})
    return state


def step2_update(solver: BoundarySolver, state: IterationState):
    """One more application of the boundary map on the current substep."""
    return _apply(solver, state)


def running_ratio(ratios):
    """Contraction estimate: geometric mean of the last two residual ratios (0.5 before any ratio exists)."""
    if not ratios:
        return 0.5
    tail = np.asarray(ratios[-2:], dtype=float)
    return float(np.exp(np.mean(np.log(np.maximum(tail, 1e-300)))))


def _converged(solver, state, block_ratios):
    res = state.residuals[-1]
    k_hat = running_ratio(block_ratios)
    if k_hat >= 1.0:
        return False
    return res <= solver.config.eps * (1.0 - k_hat) / k_hat


@dataclass
class RunResult:
    surface: BoundarySurface
    greeks: Optional["GreeksSurface"]
    report: dict
    state: IterationState
    converged: bool


def run(model: MarketModel, grid: Optional[SolverGrid] = None, config: Optional[SolverConfig] = None,
        rule: Optional[quad.QuadratureRule] = None, solver: Optional[BoundarySolver] = None) -> RunResult:
    """Iterate the boundary map to convergence on every substep.

    Stops a substep when the discrete norm of the last change is below
    ``eps (1 - k) / k`` with ``k`` the latest contraction ratio; raises
    :class:`DivergenceError` when the ratio stays at or above one for
    ``divergence_window`` consecutive iterations.
    """
    wall = time.perf_counter()
    solver, state = step1_init(model, grid, config, rule, solver)
    cfg = solver.config
    converged = True
    t_iter = time.perf_counter()
    while True:
        start = len(state.residuals) - state.n
        block_ratios = [h["ratio"] for h in state.history[start:] if h["ratio"] is not None]
        if _converged(solver, state, block_ratios):
            state.converged_blocks += 1
        else:
            streak = 0
            for rr in reversed(block_ratios):
                if rr >= 1.0:
                    streak += 1
                else:
                    break
            floor = 1e-12 * solver.K
            if streak >= cfg.divergence_window and state.residuals[-1] > floor:
                raise DivergenceError(
                    f"contraction ratio >= 1 for {streak} iterations in substep {state.block}; "
                    "reduce rho_factor", block_ratios)
            if state.n < cfg.max_iter and state.residuals[-1] > floor:
                state = step2_update(solver, state)
                continue
            if state.residuals[-1] > floor:
                converged = False
            else:
                state.converged_blocks += 1
        if state.block + 1 >= len(state.blocks):
            break
        state.block += 1
        state.n = 0
        k0, k1 = state.blocks[state.block]
        solver.extrapolate(state, k0, k1)
        state = _apply(solver, state)
    state.timings["iterate"] = time.perf_counter() - t_iter
    t_post = time.perf_counter()
    surface, greeks = finalize(solver, state)
    state.timings["greeks"] = time.perf_counter() - t_post
    t_fit = time.perf_counter()
    fit = smooth_fit_residual(solver, state, stride=cfg.fit_stride)
    state.timings["smooth_fit"] = time.perf_counter() - t_fit
    state.timings["total"] = time.perf_counter() - wall
    report = build_report(solver, state, surface, converged, fit)
    return RunResult(surface=surface, greeks=greeks, report=report, state=state, converged=converged)


# derived quantities

@dataclass
class GreeksSurface:
    """Derivatives of the boundary: time, simplex-angle gradient and Hessian."""

    t: np.ndarray
    zeta_axes: tuple
    F_t: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    grad_zeta: np.ndarray
    hess_zeta: np.ndarray

    def to_csv(self, path, header=None):
        d = len(self.zeta_axes)
        with open(path, "w", newline="") as fh:
            for key, val in (header or {}).items():
                fh.write(f"# {key}={val}\n")
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{j + 2}" for j in range(d)] + ["F_t"] + [f"F_{j + 2}" for j in range(d)]
                       + [f"F_{j + 2}{l + 2}" for j in range(d) for l in range(j, d)])
            if d:
                mesh = np.stack(np.meshgrid(*self.zeta_axes, indexing="ij"), axis=-1).reshape(-1, d)
                xh = frontfix.xhat_from_zeta(mesh)
                order = np.lexsort(xh.T[::-1])
            else:
                xh = np.zeros((1, 0))
                order = np.arange(1)
            iu = np.triu_indices(d)
            for k, tk in enumerate(self.t):
                ft = np.reshape(self.F_t[k], -1)
                g = np.reshape(self.grad[k], (len(ft), d))
                h = np.reshape(self.hess[k], (len(ft), d, d))
                for i in order:
                    w.writerow([repr(float(v)) for v in (tk, *xh[i], ft[i], *g[i], *h[i][iu])])


def density_greeks(solver: BoundarySolver, state: IterationState):
    """Boundary derivatives by differentiating the kernel inside the converged representation."""
    g = solver.grid
    d = g.d
    nt = len(g.t)
    m = g.m
    Ft = np.zeros((nt, m))
    gz = np.zeros((nt, m, d))
    hz = np.zeros((nt, m, d, d))
    F_grid = state.F.reshape((nt,) + (g.shape or (1,)))
    Ft_prev = frontfix.time_derivative(g.t, F_grid)
    for k in range(nt):
        solver.table.update_row(k, F_grid[k], Ft_prev[k])
    channels = ("G", "Gt") + (("Gzeta", "Gzz") if d else ())
    kern = HyperplaneKernel(solver.table, solver.config.order, channels, solver.config.kernel_sign)
    phi = state.phi
    for k in range(1, nt):
        W, tn = solver.node_weights(k, kernel=kern)
        # time derivative: d/dt int_0^t G(t; t - s) phi(t - s) ds
        #   = int G(t; 0) phi(0) (endpoint) + int dG/dt|_s phi + int G dphi/dtau
        u_t = np.einsum("ijm,jm->i", W[1], phi[:k + 1])
        Wd = _hat_derivative_weights(solver, kern, k, tn)
        u_t += np.einsum("ijm,jm->i", Wd, phi[:k + 1])
        u_t += _endpoint_term(solver, k, phi[0])
        Ft[k] = -u_t
        if d:
            for a in range(d):
                gz[k, :, a] = -np.einsum("ijm,jm->i", W[2 + a], phi[:k + 1])
            for a in range(d):
                for b in range(d):
                    hz[k, :, a, b] = -np.einsum("ijm,jm->i", W[2 + d + a * d + b], phi[:k + 1])
    Ft[0] = Ft[1]
    # restore tables without the time-derivative field
    for k in range(nt):
        solver.table.update_row(k, F_grid[k])
    return Ft, gz, hz


def _hat_derivative_weights(solver, kern, k, tn):
    """Weights of ``int G dphi/dtau`` using the derivative of the sqrt(t) hats."""
    g = solver.grid
    kG = HyperplaneKernel(solver.table, solver.config.order, ("G",), solver.config.kernel_sign)
    centre, L = kG.place(g.t[k], solver.targets, tn)
    xi, xw = solver.unit
    d = g.d
    P = len(solver.targets)
    if d:
        eta = centre[:, :, None, :] + np.einsum("ptij,qj->ptqi", L, xi)
        jac = np.abs(np.linalg.det(L))
    else:
        eta = np.zeros((P, len(tn.tau), 1, 0))
        jac = np.ones((P, len(tn.tau)))
    vals = kG.values(g.t[k], solver.targets, tn, eta)
    coef = vals * (tn.weight[None, None, :, None] * jac[None, :, :, None] * xw[None, None, None, :])
    sidx, sw = quad.tensor_stencil(g.zeta_axes, eta)
    W = kernels.scatter_hat_stencil(coef, tn.left, -tn.dh, tn.dh, sidx, sw, k + 1, g.m)
    return W[0]


def _endpoint_term(solver, k, phi0):
    """``int_H G(t_k, (0, zeta); 0, (0, eta)) phi(0, eta) deta`` by the matched tensor rule."""
    g = solver.grid
    tk = g.t[k]
    tn = quad.TimeNodes(tau=np.array([0.0]), delta=np.array([tk]), weight=np.array([1.0]),
                        left=np.array([0], dtype=np.intp), h0=np.array([1.0]), h1=np.array([0.0]),
                        dh=np.array([0.0]))
    kG = HyperplaneKernel(solver.table, solver.config.order, ("G",), solver.config.kernel_sign)
    centre, L = kG.place(tk, solver.targets, tn)
    xi, xw = solver.unit
    d = g.d
    P = len(solver.targets)
    if d:
        eta = centre[:, :, None, :] + np.einsum("ptij,qj->ptqi", L, xi)
        jac = np.abs(np.linalg.det(L))
    else:
        eta = np.zeros((P, 1, 1, 0))
        jac = np.ones((P, 1))
    vals = kG.values(tk, solver.targets, tn, eta)[0]
    sidx, sw = quad.tensor_stencil(g.zeta_axes, eta)
    phi_eta = np.sum(sw * phi0[sidx], axis=-1)
    return np.sum(vals * phi_eta * jac[:, :, None] * xw[None, None, :], axis=(1, 2))


def finalize(solver: BoundarySolver, state: IterationState):
    g = solver.grid
    nt = len(g.t)
    F_grid = state.F.reshape((nt,) + (g.shape or ()))
    greeks = None
    Ft = None
    if solver.config.greeks:
        Ft, gz, hz = density_greeks(solver, state)
        shape = (nt,) + (g.shape or ())
        Ft = Ft.reshape(shape)
        gz = gz.reshape(shape + (g.d,))
        hz = hz.reshape(shape + (g.d, g.d))
        if g.d:
            xh = frontfix.xhat_from_zeta(np.broadcast_to(
                np.stack(np.meshgrid(*g.zeta_axes, indexing="ij"), axis=-1), shape + (g.d,)))
            gx, hx = frontfix.zeta_to_xhat_derivatives(xh, gz, hz)
        else:
            gx, hx = gz, hz
        greeks = GreeksSurface(t=g.t, zeta_axes=g.zeta_axes, F_t=Ft, grad=gx, hess=hx, grad_zeta=gz, hess_zeta=hz)
    surface = BoundarySurface.from_values(g.t, g.zeta_axes, F_grid, F_t=Ft)
    return surface, greeks


def value_at(solver: BoundarySolver, state: IterationState, k: int, z, channels=("G",), n_sigma: int = 32):
    """Channels of the representation at ``(t_k, z, zeta_i)`` for every angle node.

    ``z`` may be a scalar or a sequence of levels (``z > 0`` lies off the
    hyperplane). Returns ``(C, m)`` or ``(C, len(z), m)``.
    """
    levels = np.atleast_1d(np.asarray(z, dtype=float))
    m = solver.grid.m
    targets = np.tile(solver.targets, (len(levels), 1))
    targets[:, 0] = np.repeat(levels, m)
    kern = HyperplaneKernel(solver.table, solver.config.order, channels, solver.config.kernel_sign)
    W, _ = solver.node_weights(k, kernel=kern, targets=targets, n_sigma=n_sigma)
    out = np.einsum("cijm,jm->ci", W, state.phi[:k + 1]).reshape(len(channels), len(levels), m)
    return out if np.ndim(z) else out[:, 0]


def smooth_fit_residual(solver: BoundarySolver, state: IterationState, offset: float = 0.05, stride: int = 1,
                        n_sigma: int = 64):
    """``sup |u_x1 - u + K|`` over the hyperplane grid (every ``stride``-th time node).

    ``u_x1`` on the hyperplane is extrapolated quadratically from the analytic
    kernel derivative at ``z = h, 2h, 3h`` off the hyperplane, with
    ``h = offset * sqrt(A_zz t)`` so the offset tracks the diffusion length.
    """
    worst = 0.0
    g = solver.grid
    if not np.any(state.phi[1:]):
        # no density yet: the representation is zero and u_x1 - u + K = K
        return float(solver.K)
    for k in range(1, len(g.t), max(1, int(stride))):
        a_zz = 1.0 / solver.jump(k)
        h = offset * np.sqrt(float(np.max(a_zz)) * g.t[k])
        d = value_at(solver, state, k, [h, 2 * h, 3 * h], ("Gz",), n_sigma=n_sigma)[0]
        uz = 3.0 * d[0] - 3.0 * d[1] + d[2]
        u0 = solver.K - state.F[k]
        worst = max(worst, float(np.max(np.abs(uz - u0 + solver.K))))
    return worst


def bounds_report(solver: BoundarySolver, state: IterationState, z_levels=(0.05, 0.1, 0.2, 0.4), tol=None,
                  quad_tol=None):
    """Violation counts of ``0 < F <= K``, time monotonicity and ``u >= payoff`` at interior samples.

    ``tol`` applies to the monotonicity check and ``quad_tol`` (default
    ``1e-3 K``) to value dominance, which is limited by quadrature accuracy.
    """
    K = solver.K
    g = solver.grid
    tol = 1e-6 * K if tol is None else tol
    quad_tol = 1e-3 * K if quad_tol is None else quad_tol
    F = state.F
    out = {
        "F_nonpositive": int(np.sum(F <= 0)),
        "F_above_strike": int(np.sum(F > K * (1 + 1e-12))),
        "F_increasing_in_t": int(np.sum(np.diff(F, axis=0) > tol)),
    }
    viol = 0
    worst = np.inf
    levels = np.asarray(z_levels, dtype=float)
    for k in range(1, len(g.t)):
        u = value_at(solver, state, k, levels)[0]
        pay = np.maximum(K - np.exp(levels)[:, None] * F[k][None, :], 0.0)
        gap = u - pay
        viol += int(np.sum(gap < -quad_tol))
        worst = min(worst, float(gap.min()))
    out["value_below_payoff"] = viol
    out["worst_value_gap"] = worst
    return out


def build_report(solver, state, surface, converged, fit):
    """Run summary; wall-clock timings stay in ``state.timings`` so the report is reproducible."""
    return {
        "converged": bool(converged),
        "mode": solver.config.mode,
        "blocks": [list(b) for b in state.blocks],
        "sweeps": state.sweeps,
        "residuals": state.residuals,
        "sup_residuals": state.sup_residuals,
        "k_hat": state.ratios,
        "history": state.history,
        "clamp_counts": state.clamps,
        "smooth_fit_residual": fit,
        "surface_check": surface.check(solver.K),
        "backend": kernels.BACKEND,
        "config": asdict(solver.config),
    }


def write_report(path, report):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=float)


# v = t u formulation (single asset)

def _source_terms(solver, k, zs, zw, U, edge=None, n_y=24, width=8.0):
    """``W(t_k, 0)`` and ``dW/dz(t_k, 0)`` for the source ``int int G u dy ds`` (single asset).

    ``U`` holds ``u`` on the levels ``zs``; ``edge`` is ``u`` on the
    hyperplane (default ``K - F``). The inner integral follows the
    Gaussian, since it is much narrower than the level spacing for
    ``tau`` close to ``t_k``.
    """
    g = solver.grid
    tn = quad.time_nodes(g.t, k, solver.config.n_sigma, "sqrt", solver.config.first_panel_nodes)
    tab = solver.table
    last = len(g.t) - 1
    tmid = 0.5 * (g.t[k] + tn.tau)
    ri, rw = tab.time_index(tmid)
    nxt = np.minimum(ri + 1, last)
    A = (1 - rw) * tab.A[ri, 0, 0, 0] + rw * tab.A[nxt, 0, 0, 0]
    B = (1 - rw) * tab.B[ri, 0, 0] + rw * tab.B[nxt, 0, 0]
    r = (1 - rw) * tab.r[ri, 0] + rw * tab.r[nxt, 0]
    lnF_tau = tn.h0 * tab.lnF[tn.left, 0] + tn.h1 * tab.lnF[tn.left + 1, 0]
    mean = B * tn.delta + tab.lnF[k, 0] - lnF_tau
    var = A * tn.delta
    sd = np.sqrt(var)
    if edge is None:
        edge = solver.K - np.exp(tab.lnF[:, 0])
    levels = np.concatenate([[0.0], zs])
    spline = CubicSpline(levels, np.column_stack([edge, U]).T)
    # G(t, 0; tau, y) is a Gaussian in y about mean
    lo = np.clip(mean - width * sd, 0.0, levels[-1])
    hi = np.clip(mean + width * sd, 0.0, levels[-1])
    xg, wg = np.polynomial.legendre.leggauss(n_y)
    y = lo[:, None] + 0.5 * (hi - lo)[:, None] * (xg[None, :] + 1)
    wy = 0.5 * (hi - lo)[:, None] * wg[None, :]
    vals = spline(y)
    rows = np.arange(len(tn.tau))[:, None]
    u_tau = tn.h0[:, None] * vals[rows, np.arange(n_y)[None, :], tn.left[:, None]] \
        + tn.h1[:, None] * vals[rows, np.arange(n_y)[None, :], tn.left[:, None] + 1]
    dz = y - mean[:, None]
    G = np.exp(-dz ** 2 / (2 * var[:, None]) - (r * tn.delta)[:, None]) / np.sqrt(2 * np.pi * var[:, None])
    Gz = G * dz / var[:, None]
    wts = tn.weight[:, None] * wy
    return float(np.sum(wts * G * u_tau)), float(np.sum(wts * Gz * u_tau))


def v_node(solver: BoundarySolver, k: int, U, phi_v, W=None, edge=None):
    """``(phi_v(t_k), v(t_k, 0))`` for the ``v`` problem with source ``U`` on the interior levels.

    ``v`` satisfies ``v_z - v = -K t`` on the hyperplane, vanishes at
    ``t = 0`` and is driven by ``u``: ``v = int G phi_v + int int G u``.
    """
    if W is None:
        W, _ = solver.node_weights(k)
    zs, zw = solver.v_nodes
    src, dsrc = _source_terms(solver, k, zs, zw, U, edge)
    gam = solver.K * solver.grid.t[k] + dsrc + solver.config.kernel_sign * src
    phi_k = volterra.march_step(W[1], np.array([gam]), phi_v, solver.jump(k), k)
    hist = phi_v[:k + 1].copy()
    hist[k] = phi_k
    v = float(np.einsum("ijm,jm->i", W[0], hist)[0]) + src
    return phi_k, v


def solve_v(solver: BoundarySolver, U, edge=None):
    """March the ``v`` problem over every node for a fixed source grid ``U`` ``(Nt+1, levels)``.

    ``edge`` is the source on the hyperplane, ``K - F`` by default.
    """
    nt = len(solver.grid.t)
    phi_v = np.zeros((nt, 1))
    v = np.zeros(nt)
    for k in range(1, nt):
        phi_v[k], v[k] = v_node(solver, k, U, phi_v, edge=edge)
    return phi_v, v
