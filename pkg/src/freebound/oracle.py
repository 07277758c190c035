"""Reference solvers for acceptance: a CRR binomial tree and projected SOR on finite differences.

Neither shares numerical code with the boundary solver. Both march in
time-to-maturity and report the exercise boundary as the total basket level
``S1 + ... + Sn`` where continuation first exceeds the payoff along a ray.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import kernels
from .errors import DomainError, NonConvergenceError
from .frontfix import BoundarySurface, zeta_from_xhat
from .model import MarketModel, ellipticity_bounds, working_samples

logger = logging.getLogger(__name__)

DEFAULT_GRID = {1: (400, 200), 2: (120, 100)}


@dataclass
class OracleResult:
    """Output of an oracle run.

    ``boundary`` is ``(Nt+1,)`` for one asset and ``(Nt+1, rays)`` for two,
    indexed by time-to-maturity ``t``; ``xhat`` lists the ray angles (share
    of the second asset). ``values``/``exercise`` belong to the last layer.
    """

    t: np.ndarray
    boundary: np.ndarray
    values: Optional[np.ndarray] = None
    exercise: Optional[np.ndarray] = None
    axes: tuple = ()
    xhat: Optional[np.ndarray] = None
    params: dict = field(default_factory=dict)

    def surface(self) -> BoundarySurface:
        if self.xhat is None:
            return BoundarySurface.from_values(self.t, (), self.boundary, interp="linear")
        zeta = zeta_from_xhat(self.xhat[:, None])[:, 0]
        return BoundarySurface.from_values(self.t, (zeta,), self.boundary, interp="linear")

    def to_csv(self, path, header=None):
        head = {"source": self.params.get("method", "oracle")}
        head.update(header or {})
        self.surface().to_csv(path, head)

    def boundary_at(self, t, xhat=None):
        """Boundary at time ``t`` (linear in ``t``) and, for two assets, linear in the ray angle."""
        t = float(t)
        j = np.clip(np.searchsorted(self.t, t) - 1, 0, len(self.t) - 2)
        w = (t - self.t[j]) / (self.t[j + 1] - self.t[j])
        row = (1 - w) * self.boundary[j] + w * self.boundary[j + 1]
        if self.xhat is None:
            return float(row)
        return np.interp(np.asarray(xhat, float), self.xhat, row)


# binomial tree

def binomial_boundary(K: float, r: float, sigma: float, T: float, steps: int = 5000, width: Optional[int] = None) -> OracleResult:
    """Exercise boundary of the single-asset put on a CRR lattice centred at the strike.

    The lattice is widened by ``width`` levels (default ``steps``) so every
    layer reaches down to the exercise region.
    """
    if steps < 100:
        raise DomainError("binomial oracle needs at least 100 steps")
    if not sigma > 0:
        raise DomainError("volatility must be positive")
    dt = T / steps
    u = np.exp(sigma * np.sqrt(dt))
    p = (np.exp(r * dt) - 1.0 / u) / (u - 1.0 / u)
    if not 0 < p < 1:
        raise DomainError(f"risk-neutral probability {p:.4f} outside (0, 1); use more steps")
    w = steps if width is None else int(width)
    bnd = kernels.crr_layers(float(K), float(r), float(sigma), float(T), int(steps), w)
    t = dt * np.arange(steps + 1)
    bnd = _fill_gaps(bnd, K)
    return OracleResult(t=t, boundary=np.minimum(bnd, K), params={"method": "crr", "steps": steps, "width": w})


def _fill_gaps(bnd, K):
    """Carry the last boundary forward where a layer had no exercise node."""
    out = np.array(bnd, dtype=float)
    out[0] = K
    for i in range(1, len(out)):
        if not np.isfinite(out[i]):
            out[i] = out[i - 1]
    return out


def binomial_price(K: float, r: float, sigma: float, T: float, S0: float, steps: int = 5000) -> float:
    """American put price on a standard CRR tree rooted at ``S0``."""
    dt = T / steps
    u = np.exp(sigma * np.sqrt(dt))
    d = 1.0 / u
    p = (np.exp(r * dt) - d) / (u - d)
    disc = np.exp(-r * dt)
    j = np.arange(steps + 1)
    S = S0 * u ** (2.0 * j - steps)
    V = np.maximum(K - S, 0.0)
    for i in range(steps, 0, -1):
        S = S[:-1] * u
        V = np.maximum(disc * (p * V[1:] + (1 - p) * V[:-1]), K - S)
    return float(V[0])


# projected SOR

def interface_from_gap(x, root_gap, threshold, span=2, skip=0, lookback=None):
    """Location where the continuation gap leaves zero along an increasing coordinate ``x``.

    ``root_gap`` is ``sqrt(u - payoff)``, which grows linearly past the
    interface (smooth fit). A line is fitted to ``span + 1`` samples starting
    ``skip`` samples after the first positive one and its root returned,
    clipped between ``lookback`` before the first positive sample (default
    two spacings) and the first fitted sample.
    ``NaN`` when no exercise sample precedes a positive one.
    """
    x = np.asarray(x, float)
    root_gap = np.asarray(root_gap, float)
    pos = root_gap > threshold
    if not pos.any() or pos[0]:
        return np.nan
    i = int(np.argmax(pos))
    sl = slice(i + skip, min(i + skip + span + 1, len(x)))
    xs, ys = x[sl], root_gap[sl]
    if len(xs) < 2:
        return float(x[i])
    slope, icpt = np.polyfit(xs, ys, 1)
    if slope <= 0:
        return float(x[i])
    back = 2 * (x[i] - x[i - 1]) if lookback is None else lookback
    return float(np.clip(-icpt / slope, x[i] - back, xs[0]))


def _theta_steps(n_t):
    """``(theta, fraction of dt)`` per step: four implicit half steps, then Crank-Nicolson."""
    steps = [(1.0, 0.5)] * 4 if n_t >= 2 else [(1.0, 1.0)] * n_t
    steps += [(0.5, 1.0)] * max(0, n_t - 2)
    return steps


def _coef_points(S, K):
    return np.maximum(S, 1e-8 * K)


def _psor_1d_run(model, n_s, n_t, s_max, omega, tol, max_sweeps, asset=0):
    K, T = model.K, model.T
    S = np.linspace(0.0, s_max, n_s + 1)
    h = S[1] - S[0]
    dt = T / n_t
    pay = np.maximum(K - S, 0.0)
    u = pay.copy()
    t = 0.0
    layers = [u.copy()]
    times = [0.0]
    for theta, frac in _theta_steps(n_t):
        k = frac * dt
        tm = t + 0.5 * k
        pts = np.zeros((len(S), model.n))
        pts[:, asset] = _coef_points(S, K)
        if model.n > 1:
            pts[:, [j for j in range(model.n) if j != asset]] = 1e-8 * K
        v = model.cov(tm, pts)[:, asset, asset]
        r = np.broadcast_to(model.r(tm, pts), S.shape)
        al = 0.5 * v * S**2 / h**2
        be = r * S / (2 * h)
        lo_c, di_c, up_c = al - be, -2 * al - r, al + be
        rhs = u.copy()
        if theta < 1:
            Lu = np.zeros_like(u)
            Lu[1:-1] = lo_c[1:-1] * u[:-2] + di_c[1:-1] * u[1:-1] + up_c[1:-1] * u[2:]
            rhs = u + (1 - theta) * k * Lu
        lower = -theta * k * lo_c
        diag = 1.0 - theta * k * di_c
        upper = -theta * k * up_c
        new = u.copy()
        new[0] = K
        new[-1] = 0.0
        sweeps = kernels.psor_1d(new, rhs, pay, lower, diag, upper, omega, tol, max_sweeps)
        if sweeps < 0:
            raise NonConvergenceError(f"PSOR did not converge in {max_sweeps} sweeps at t={t + k:.4f}")
        u = new
        t += k
        if frac == 1.0 or abs(t / dt - round(t / dt)) < 1e-9:
            layers.append(u.copy())
            times.append(t)
    return S, np.array(times), np.array(layers), pay


def psor_boundary(model: MarketModel, grid: Optional[Sequence[int]] = None, omega: float = 1.5, tol: float = 1e-8,
                  max_sweeps: int = 20000, s_max_factor: float = 2.5, rays: Optional[Sequence[float]] = None) -> OracleResult:
    """Projected SOR on a Crank-Nicolson discretisation of the put LCP (one or two assets).

    ``grid`` is ``(n_s, n_t)``: cells per price axis and time steps. The
    first step is replaced by implicit half steps to damp the payoff kink.
    Prices run over ``[0, s_max_factor * K]`` with ``u = K`` at the origin
    and ``u = 0`` at the far edges.
    """
    if not 1 < omega < 2:
        raise DomainError("over-relaxation factor must lie in (1, 2)")
    if model.n not in (1, 2):
        raise DomainError("PSOR oracle supports one or two assets")
    ellipticity_bounds(model, working_samples(model))
    n_s, n_t = grid or DEFAULT_GRID[model.n]
    s_max = s_max_factor * model.K
    if model.n == 1:
        return _psor_single(model, n_s, n_t, s_max, omega, tol, max_sweeps)
    return _psor_pair(model, n_s, n_t, s_max, omega, tol, max_sweeps, rays)


def _psor_single(model, n_s, n_t, s_max, omega, tol, max_sweeps):
    K = model.K
    S, times, layers, pay = _psor_1d_run(model, n_s, n_t, s_max, omega, tol, max_sweeps)
    thr = np.sqrt(1e-9 * K + 10 * tol)
    bnd = np.array([interface_from_gap(S, np.sqrt(np.maximum(u - pay, 0.0)), thr) for u in layers])
    bnd = _fill_gaps(bnd, K)
    u = layers[-1]
    return OracleResult(t=times, boundary=np.minimum(bnd, K), values=u, exercise=(u - pay <= thr**2) & (pay > 0),
                        axes=(S,), params={"method": "psor", "grid": [n_s, n_t], "omega": omega, "s_max": s_max})


def _stencil_2d(model, S1, S2, tm, h):
    K = model.K
    P1, P2 = np.meshgrid(S1, S2, indexing="ij")
    pts = np.stack([_coef_points(P1, K), _coef_points(P2, K)], axis=-1)
    v = model.cov(tm, pts)
    r = np.broadcast_to(model.r(tm, pts), P1.shape)
    a11 = 0.5 * v[..., 0, 0] * P1**2 / h**2
    a22 = 0.5 * v[..., 1, 1] * P2**2 / h**2
    a12 = v[..., 0, 1] * P1 * P2 / (4 * h**2)
    b1 = r * P1 / (2 * h)
    b2 = r * P2 / (2 * h)
    c = np.zeros((9,) + P1.shape)
    c[0] = a12
    c[1] = a11 - b1
    c[2] = -a12
    c[3] = a22 - b2
    c[4] = -2 * a11 - 2 * a22 - r
    c[5] = a22 + b2
    c[6] = -a12
    c[7] = a11 + b1
    c[8] = a12
    return c


def _apply_stencil(c, u):
    out = np.zeros_like(u)
    inner = out[1:-1, 1:-1]
    for s in range(9):
        di, dj = s // 3 - 1, s % 3 - 1
        inner += c[s, 1:-1, 1:-1] * u[1 + di:u.shape[0] - 1 + di, 1 + dj:u.shape[1] - 1 + dj]
    return out


def _psor_pair(model, n_s, n_t, s_max, omega, tol, max_sweeps, rays):
    K, T = model.K, model.T
    S = np.linspace(0.0, s_max, n_s + 1)
    h = S[1] - S[0]
    dt = T / n_t
    P1, P2 = np.meshgrid(S, S, indexing="ij")
    pay = np.maximum(K - P1 - P2, 0.0)
    # the edges S1 = 0 and S2 = 0 are single-asset puts in the other asset
    _, _, edge2, _ = _psor_1d_run(model, n_s, n_t, s_max, omega, tol, max_sweeps, asset=1)
    _, _, edge1, _ = _psor_1d_run(model, n_s, n_t, s_max, omega, tol, max_sweeps, asset=0)
    rays = np.linspace(0.1, 0.9, 17) if rays is None else np.asarray(rays, float)
    lam = np.arange(0.0, 0.98 * s_max, h / 4)
    thr = 1e-9 * K + 10 * tol
    u = pay.copy()
    t = 0.0
    times = [0.0]
    bnds = [np.full(len(rays), K)]
    layer = 0
    for theta, frac in _theta_steps(n_t):
        k = frac * dt
        c = _stencil_2d(model, S, S, t + 0.5 * k, h)
        rhs = u.copy()
        if theta < 1:
            rhs = u + (1 - theta) * k * _apply_stencil(c, u)
        sten = -theta * k * c
        sten[4] += 1.0
        new = u.copy()
        t += k
        whole = frac == 1.0 or abs(t / dt - round(t / dt)) < 1e-9
        if whole:
            layer += 1
            new[0, :] = edge2[layer]
            new[:, 0] = edge1[layer]
        else:
            # half steps: interpolate the edge solutions between layers
            w = (t - (layer * dt)) / dt
            new[0, :] = (1 - w) * edge2[layer] + w * edge2[layer + 1]
            new[:, 0] = (1 - w) * edge1[layer] + w * edge1[layer + 1]
        new[-1, :] = 0.0
        new[:, -1] = 0.0
        sweeps = kernels.psor_2d(new, rhs, pay, sten, omega, tol, max_sweeps)
        if sweeps < 0:
            raise NonConvergenceError(f"PSOR did not converge in {max_sweeps} sweeps at t={t:.4f}")
        u = new
        if whole:
            times.append(t)
            bnds.append(_ray_boundary(S, u - pay, rays, lam, np.sqrt(thr)))
    bnd = np.array(bnds)
    for j in range(bnd.shape[1]):
        bnd[:, j] = _fill_gaps(bnd[:, j], K)
    return OracleResult(t=np.array(times), boundary=np.minimum(bnd, K), values=u, exercise=(u - pay <= thr) & (pay > 0),
                        axes=(S, S), xhat=rays,
                        params={"method": "psor", "grid": [n_s, n_s, n_t], "omega": omega, "s_max": s_max})


def _ray_boundary(S, gap, rays, lam, thr):
    interp = RegularGridInterpolator((S, S), np.sqrt(np.maximum(gap, 0.0)), method="linear")
    out = np.empty(len(rays))
    h = S[1] - S[0]
    per_cell = int(round(h / (lam[1] - lam[0])))
    for j, share in enumerate(rays):
        pts = np.stack([lam * (1 - share), lam * share], axis=-1)
        # skip the cells cut by the interface (up to a diagonal), fit over the next cell
        out[j] = interface_from_gap(lam, interp(pts), thr, span=per_cell, skip=(3 * per_cell) // 2, lookback=3 * h)
    return out


def lcp_residual(result: OracleResult, K: float) -> float:
    """``max |min(u - payoff, ...)|`` proxy: the most negative ``u - payoff`` on the last layer."""
    if result.values is None:
        return 0.0
    if len(result.axes) == 1:
        pay = np.maximum(K - result.axes[0], 0.0)
    else:
        P1, P2 = np.meshgrid(*result.axes, indexing="ij")
        pay = np.maximum(K - P1 - P2, 0.0)
    return float(max(0.0, -(result.values - pay).min()))


def write_oracle_csv(path, result: OracleResult):
    result.to_csv(path)


def oracle_from_surface(surface: BoundarySurface, method: str = "file") -> OracleResult:
    """Wrap a saved boundary surface (one or two assets) as an oracle result."""
    if surface.d == 0:
        return OracleResult(t=surface.t, boundary=surface.values, params={"method": method})
    if surface.d != 1:
        raise DomainError("file oracles are limited to two assets")
    xhat = surface.xhat_nodes()[:, 0]
    return OracleResult(t=surface.t, boundary=surface.values, xhat=xhat, params={"method": method})


def compare_boundaries(solver_surface: BoundarySurface, oracle: OracleResult, t_min: float, xhat_range=(0.1, 0.9)):
    """Max relative deviation of a solver surface from an oracle boundary on ``t >= t_min`` (and an x̂ band).

    The comparison runs on the oracle's own nodes; the solver surface is
    resampled there, with a warning when its grid differs.
    """
    same_t = len(solver_surface.t) == len(oracle.t) and np.allclose(solver_surface.t, oracle.t, rtol=1e-12, atol=0)
    xs = None
    if oracle.xhat is not None:
        xs = oracle.xhat[(oracle.xhat >= xhat_range[0] - 1e-12) & (oracle.xhat <= xhat_range[1] + 1e-12)]
        own = np.sort(solver_surface.xhat_nodes()[:, 0]) if solver_surface.d == 1 else np.zeros(0)
        same_x = len(own) == len(oracle.xhat) and np.allclose(own, np.sort(oracle.xhat))
    else:
        same_x = True
    if not (same_t and same_x):
        logger.warning("solver and oracle grids differ; resampling the solver surface onto the oracle nodes")
    worst = 0.0
    rows = []
    for j, t in enumerate(oracle.t):
        if t < t_min - 1e-12:
            continue
        if xs is None:
            ref = np.array([float(oracle.boundary[j])])
            got = np.array([float(solver_surface.evaluate(t, np.zeros(0))[0])])
            pts = [None]
        else:
            ref = np.interp(xs, oracle.xhat, oracle.boundary[j])
            got = np.array([float(solver_surface.evaluate(t, np.array([x]))[0]) for x in xs])
            pts = xs
        rel = np.abs(got - ref) / ref
        worst = max(worst, float(rel.max()))
        for x, g, f, e in zip(pts, got, ref, rel):
            rows.append({"t": float(t), "xhat": None if x is None else float(x), "solver": float(g),
                         "oracle": float(f), "rel_err": float(e)})
    return worst, rows


def per_time_errors(rows):
    """Largest relative error at each comparison time."""
    out = {}
    for row in rows:
        out[row["t"]] = max(out.get(row["t"], 0.0), row["rel_err"])
    return [{"t": t, "max_rel_err": e} for t, e in sorted(out.items())]


def write_comparison_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["t", "xhat", "solver", "oracle", "rel_err"])
        w.writeheader()
        w.writerows(rows)
