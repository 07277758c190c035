"""Market model for a basket of assets under a diffusion, plus the basket put payoff.

Time is always time-to-maturity: ``t = 0`` is expiry and ``t = T`` is today.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, EllipticityError

logger = logging.getLogger(__name__)

CovarianceFn = Callable[[float, np.ndarray], np.ndarray]
RateFn = Callable[[float, np.ndarray], float]


@dataclass(frozen=True)
class MarketModel:
    """Multi-asset diffusion with covariance ``v(t, S)`` and short rate ``r(t, S)``.

    Parameters
    ----------
    n : int
        Number of assets.
    covariance : callable
        ``covariance(t, S)`` with ``S`` of shape ``(..., n)`` returning the
        annualised covariance of log returns, shape ``(..., n, n)``. Builtin
        families are vectorised; a user callback that only accepts a single
        point should be wrapped with ``vectorized=False``.
    rate : callable
        ``rate(t, S)`` returning the short rate, broadcast over the leading
        axes of ``S``.
    strike, horizon : float
        Strike ``K`` and horizon ``T`` in years.
    constant_covariance, constant_rate : optional
        Fast path used when the coefficients do not depend on ``(t, S)``.
    """

    n: int
    covariance: CovarianceFn
    rate: RateFn
    strike: float
    horizon: float
    constant_covariance: Optional[np.ndarray] = None
    constant_rate: Optional[float] = None
    vectorized: bool = True
    label: str = "custom"
    spec: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if int(self.n) < 1:
            raise DomainError(f"dimension must be >= 1, got {self.n}")
        if not self.strike > 0:
            raise DomainError(f"strike must be positive, got {self.strike}")
        if not self.horizon > 0:
            raise DomainError(f"horizon must be positive, got {self.horizon}")

    @property
    def K(self) -> float:
        return float(self.strike)

    @property
    def T(self) -> float:
        return float(self.horizon)

    def cov(self, t, S) -> np.ndarray:
        """Covariance at ``(t, S)``; ``S`` has shape ``(..., n)``."""
        S = np.asarray(S, dtype=float)
        if self.constant_covariance is not None:
            return np.broadcast_to(self.constant_covariance, S.shape[:-1] + (self.n, self.n))
        if self.vectorized:
            return np.asarray(self.covariance(t, S), dtype=float)
        flat = S.reshape(-1, self.n)
        tt = np.broadcast_to(np.asarray(t, dtype=float), S.shape[:-1]).reshape(-1)
        out = np.stack([np.asarray(self.covariance(tt[i], flat[i]), dtype=float) for i in range(len(flat))])
        return out.reshape(S.shape[:-1] + (self.n, self.n))

    def r(self, t, S) -> np.ndarray:
        S = np.asarray(S, dtype=float)
        if self.constant_rate is not None:
            return np.full(S.shape[:-1], float(self.constant_rate))
        if self.vectorized:
            return np.broadcast_to(np.asarray(self.rate(t, S), dtype=float), S.shape[:-1]).copy()
        flat = S.reshape(-1, self.n)
        tt = np.broadcast_to(np.asarray(t, dtype=float), S.shape[:-1]).reshape(-1)
        out = np.array([float(self.rate(tt[i], flat[i])) for i in range(len(flat))])
        return out.reshape(S.shape[:-1])


def payoff(S, K: float):
    """Basket put payoff ``max(K - sum(S), 0)`` along the last axis."""
    S = np.asarray(S, dtype=float)
    if np.any(~(S > 0)):
        raise DomainError("asset prices must be strictly positive")
    val = np.maximum(K - S.sum(axis=-1), 0.0)
    return float(val) if val.ndim == 0 else val


def ellipticity_bounds(model: MarketModel, samples) -> tuple[float, float]:
    """Smallest and largest covariance eigenvalue over sample points.

    ``samples`` is a sequence of ``(t, S)`` pairs. Raises
    :class:`EllipticityError` if the smallest eigenvalue is not positive or a
    sampled matrix is not symmetric.
    """
    samples = list(samples)
    if not samples:
        raise DomainError("ellipticity_bounds needs at least one sample")
    lo, hi = np.inf, -np.inf
    for t, S in samples:
        v = np.asarray(model.cov(t, np.asarray(S, dtype=float)), dtype=float)
        v = v.reshape(-1, model.n, model.n)
        asym = np.max(np.abs(v - np.swapaxes(v, -1, -2)))
        if asym > 1e-12 * max(1.0, np.max(np.abs(v))):
            raise EllipticityError(f"covariance not symmetric at t={t}: max asymmetry {asym:.3e}")
        ev = np.linalg.eigvalsh(v)
        lo = min(lo, float(ev[:, 0].min()))
        hi = max(hi, float(ev[:, -1].max()))
    if not lo > 0:
        raise EllipticityError(f"covariance not uniformly elliptic: smallest eigenvalue {lo:.3e}")
    return lo, hi


def working_samples(model: MarketModel, n_time=5, n_space=64, seed=0):
    """Sample set covering the region the boundary can visit: sum(S) in [K/4, 2K]."""
    rng = np.random.default_rng(seed)
    out = []
    for t in np.linspace(0.0, model.T, n_time):
        w = rng.dirichlet(np.ones(model.n), size=n_space)
        level = rng.uniform(0.25, 2.0, size=(n_space, 1)) * model.K
        w = np.clip(w, 1e-3, None)
        out.append((float(t), w / w.sum(axis=1, keepdims=True) * level))
    return out


# builtin coefficient families

def _corr_matrix(n, corr):
    if corr is None:
        return np.eye(n)
    c = np.asarray(corr, dtype=float)
    if c.ndim == 0:
        m = np.full((n, n), float(c))
        np.fill_diagonal(m, 1.0)
        return m
    return c


def constant_covariance(vols, corr=None):
    vols = np.atleast_1d(np.asarray(vols, dtype=float))
    rho = _corr_matrix(len(vols), corr)
    # outer product keeps the matrix exactly symmetric
    return np.outer(vols, vols) * rho


def cev_covariance(vols, corr, beta, ref):
    """Local-vol family ``sigma_i(S) = vols_i * (S_i / ref)**(beta - 1)``."""
    vols = np.atleast_1d(np.asarray(vols, dtype=float))
    rho = _corr_matrix(len(vols), corr)

    def cov(t, S):
        sig = vols * (np.asarray(S, dtype=float) / ref) ** (beta - 1.0)
        return sig[..., :, None] * sig[..., None, :] * rho

    return cov


def black_scholes(vols, corr=None, rate=0.05, strike=100.0, horizon=1.0) -> MarketModel:
    """Constant-coefficient model: correlated geometric Brownian motions."""
    C = constant_covariance(vols, corr)
    r = float(rate)
    return MarketModel(
        n=C.shape[0], covariance=lambda t, S: np.broadcast_to(C, np.shape(S)[:-1] + C.shape),
        rate=lambda t, S: r, strike=strike, horizon=horizon,
        constant_covariance=C, constant_rate=r, label="black-scholes",
    )


def model_from_spec(spec: dict) -> MarketModel:
    """Build a model from the JSON-level description.

    ``rate`` is a number or ``{"name": "linear-term", "r0": .., "slope": ..}``;
    ``covariance`` is a matrix or ``{"name": "black-scholes"|"cev", ...}``.
    """
    n = int(spec["n"])
    K = float(spec["strike"])
    T = float(spec["horizon"])

    rate = spec.get("rate", 0.0)
    const_r = None
    if isinstance(rate, (int, float)):
        const_r = float(rate)
        rate_fn = lambda t, S: const_r  # noqa: E731
    elif rate.get("name") == "linear-term":
        r0, slope = float(rate["r0"]), float(rate.get("slope", 0.0))
        rate_fn = lambda t, S: r0 + slope * np.asarray(t, dtype=float)  # noqa: E731
    else:
        raise DomainError(f"unknown rate builtin {rate!r}")

    cov = spec["covariance"]
    const_c = None
    if isinstance(cov, list):
        const_c = np.asarray(cov, dtype=float)
        if const_c.shape != (n, n):
            raise DomainError(f"covariance matrix must be {n}x{n}")
        cov_fn = lambda t, S: np.broadcast_to(const_c, np.shape(S)[:-1] + (n, n))  # noqa: E731
    elif cov.get("name") == "black-scholes":
        const_c = constant_covariance(cov["vols"], cov.get("corr"))
        cov_fn = lambda t, S: np.broadcast_to(const_c, np.shape(S)[:-1] + (n, n))  # noqa: E731
    elif cov.get("name") == "cev":
        cov_fn = cev_covariance(cov["vols"], cov.get("corr"), float(cov["beta"]), float(cov.get("ref", K)))
    else:
        raise DomainError(f"unknown covariance builtin {cov!r}")
    if const_c is not None and const_c.shape != (n, n):
        raise DomainError(f"covariance must be {n}x{n}, got {const_c.shape}")

    return MarketModel(n=n, covariance=cov_fn, rate=rate_fn, strike=K, horizon=T,
                       constant_covariance=const_c, constant_rate=const_r,
                       label=cov.get("name", "matrix") if isinstance(cov, dict) else "matrix",
                       spec=dict(spec))
