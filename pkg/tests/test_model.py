import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from freebound import model
from freebound.errors import DomainError, EllipticityError

positive = st.floats(min_value=1e-3, max_value=500.0, allow_nan=False)


def test_payoff_in_the_money():
    assert model.payoff([50.0, 30.0], 100.0) == 20.0


def test_payoff_out_of_the_money():
    assert model.payoff([120.0], 100.0) == 0.0


def test_payoff_at_the_money():
    assert model.payoff([1.0, 1.0, 1.0], 3.0) == 0.0


def test_payoff_rejects_nonpositive_prices():
    with pytest.raises(DomainError):
        model.payoff([1.0, 0.0], 3.0)


@given(st.lists(positive, min_size=2, max_size=2), st.lists(positive, min_size=2, max_size=2),
       st.floats(min_value=0.0, max_value=1.0))
def test_payoff_lipschitz_and_convex(S, T, lam):
    K = 100.0
    S, T = np.array(S), np.array(T)
    assert abs(model.payoff(S, K) - model.payoff(T, K)) <= abs(S.sum() - T.sum()) + 1e-12
    mid = lam * S + (1 - lam) * T
    assert model.payoff(mid, K) <= lam * model.payoff(S, K) + (1 - lam) * model.payoff(T, K) + 1e-12


def _const(C):
    return model.black_scholes(np.sqrt(np.diag(C)), np.asarray(C) / np.sqrt(np.outer(np.diag(C), np.diag(C))))


def test_ellipticity_identity():
    m = _const(np.eye(2))
    assert model.ellipticity_bounds(m, model.working_samples(m)) == pytest.approx((1.0, 1.0))


def test_ellipticity_diagonal():
    m = _const(np.diag([0.04, 0.09]))
    assert model.ellipticity_bounds(m, model.working_samples(m)) == pytest.approx((0.04, 0.09))


def test_ellipticity_degenerate_rejected():
    m = model.model_from_spec({"n": 2, "strike": 100, "horizon": 1, "covariance": [[0.04, 0.04], [0.04, 0.04]]})
    with pytest.raises(EllipticityError):
        model.ellipticity_bounds(m, model.working_samples(m))


def test_covariance_symmetric_exactly():
    m = model.model_from_spec({"n": 3, "strike": 100, "horizon": 1,
                               "covariance": {"name": "cev", "vols": [0.2, 0.3, 0.25], "corr": 0.4, "beta": 0.6}})
    for t, S in model.working_samples(m, n_time=3, n_space=16):
        v = m.cov(t, S)
        assert np.max(np.abs(v - np.swapaxes(v, -1, -2))) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=40), st.integers(min_value=1, max_value=40), st.integers(0, 10_000))
def test_ellipticity_monotone_under_inclusion(n1, n2, seed):
    m = model.model_from_spec({"n": 2, "strike": 100, "horizon": 1,
                               "covariance": {"name": "cev", "vols": [0.2, 0.3], "corr": 0.3, "beta": 0.5}})
    pool = model.working_samples(m, n_time=2, n_space=n1 + n2, seed=seed)
    small = [(t, S[:n1]) for t, S in pool]
    lo_s, hi_s = model.ellipticity_bounds(m, small)
    lo, hi = model.ellipticity_bounds(m, pool)
    assert lo <= lo_s and hi >= hi_s


def test_rate_builtin_and_validation():
    m = model.model_from_spec({"n": 1, "strike": 100, "horizon": 2,
                               "rate": {"name": "linear-term", "r0": 0.01, "slope": 0.02},
                               "covariance": [[0.04]]})
    assert m.r(1.0, np.array([[100.0]]))[0] == pytest.approx(0.03)
    with pytest.raises(DomainError):
        model.black_scholes([0.2], strike=-1.0)
