import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erfc

from freebound import quad, volterra, wkb
from freebound.errors import DomainError, VolterraConditionError


def _unit_kernel(t, tau):
    return np.ones_like(tau)


def _abel_kernel(t, tau):
    return 1.0 / np.sqrt(t - tau)


def _abel_exact(t):
    """Solution of phi = 1 + 2 int_0^t (t - tau)^(-1/2) phi, a Mittag-Leffler function of order one half."""
    return np.exp(4 * np.pi * t) * erfc(-2 * np.sqrt(np.pi * t))


def _solve(evaluate, t, gamma=None, exponent=0.5, basis="linear"):
    ker = volterra.VolterraKernel(evaluate, exponent=exponent, basis=basis)
    g = 0.5 * np.ones(len(t)) if gamma is None else gamma
    return volterra.solve_volterra(ker, g, t).values


def test_zero_kernel_doubles_source():
    t = np.linspace(0, 1, 11)
    g = np.sin(t) + 1
    phi = _solve(lambda t, tau: np.zeros_like(tau), t, g)
    np.testing.assert_array_equal(phi, 2 * g)


def test_first_node_is_twice_source():
    t = np.linspace(0, 1, 11)
    g = np.cos(t)
    assert _solve(_abel_kernel, t, g)[0] == 2 * g[0]


def test_smooth_kernel_exponential():
    """[DERIVED] differentiating phi / 2 = 1 / 2 + int phi gives phi' = 2 phi."""
    t = np.linspace(0, 1, 1001)
    phi = _solve(_unit_kernel, t, exponent=0.0)
    assert np.max(np.abs(phi - np.exp(2 * t))) < 1e-5


def test_smooth_kernel_second_order():
    errs = []
    for n in (50, 100, 200):
        t = np.linspace(0, 1, n + 1)
        errs.append(np.max(np.abs(_solve(_unit_kernel, t, exponent=0.0) - np.exp(2 * t))))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates >= 2 - 0.05)


def test_abel_kernel_against_closed_form():
    """[DERIVED] closed-form Mittag-Leffler solution; a graded grid resolves the sqrt(t) start."""
    t = 0.25 * np.linspace(0, 1, 201) ** 2
    phi = _solve(_abel_kernel, t)
    assert np.max(np.abs(phi / _abel_exact(t) - 1)) < 1e-3


def _abel_errors(grade, sizes=(50, 100, 200)):
    errs = []
    for n in sizes:
        t = 0.25 * np.linspace(0, 1, n + 1) ** grade
        errs.append(np.max(np.abs(_solve(_abel_kernel, t) / _abel_exact(t) - 1)))
    return np.log2(np.array(errs[:-1]) / np.array(errs[1:]))


def test_abel_kernel_refinement_order_graded():
    assert np.all(_abel_errors(2) >= 1)


def test_abel_kernel_uniform_grid_rate_approaches_one():
    # the sqrt(t) start of the solution caps uniform grids at first order, reached from below
    rates = _abel_errors(1, (50, 100, 200, 400))
    assert np.all(np.diff(rates) > 0)
    assert rates[-1] > 0.95


def test_marching_matches_neumann_series():
    n = 40
    t = np.linspace(0, 1, n + 1)
    jump = 0.5
    ker = volterra.VolterraKernel(lambda t, tau: 0.3 * np.ones_like(tau), exponent=0.0)
    W = np.zeros((n + 1, n + 1))
    for k in range(1, n + 1):
        W[k, : k + 1] = ker.weights(t, k)[0, :, 0]
    g = np.cos(3 * t)
    phi = volterra.solve_volterra(ker, g, t).values
    op = W / jump
    norm = np.max(np.sum(np.abs(op), axis=1))
    assert norm < 1
    term = g / jump
    series = term.copy()
    for r in range(1, 9):
        term = op @ term
        series += term
    tail = norm**9 / (1 - norm) * np.max(np.abs(g / jump))
    assert np.max(np.abs(phi - series)) <= tail


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_linearity(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    t = 0.2 * np.linspace(0, 1, 21) ** 2
    g1, g2 = rng.normal(size=(2, 21))
    lhs = _solve(_abel_kernel, t, alpha * g1 + beta * g2)
    rhs = alpha * _solve(_abel_kernel, t, g1) + beta * _solve(_abel_kernel, t, g2)
    scale = 1 + np.max(np.abs(lhs))
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * scale


def test_singularity_constant():
    ker = volterra.VolterraKernel(lambda t, tau: 0.5 / np.sqrt(t - tau))
    assert ker.singularity_constant(np.linspace(0, 1, 5)) == pytest.approx(1.0, rel=1e-12)


def test_stronger_singularity_rejected():
    with pytest.raises(DomainError):
        volterra.VolterraKernel(_abel_kernel, exponent=0.75)


def test_singular_step_aborts():
    t = np.linspace(0, 1, 5)
    ker = volterra.VolterraKernel(lambda t, tau: np.zeros_like(tau))
    with pytest.raises(VolterraConditionError):
        volterra.solve_volterra(ker, np.ones(5), t, jump=0.0)


def test_ill_conditioned_block_aborts():
    W = np.zeros((2, 2, 2))
    W[:, 1, :] = [[0.5, 0.5], [0.5, 0.5 - 1e-12]]
    with pytest.raises(VolterraConditionError) as info:
        volterra.march_step(W, np.ones(2), np.zeros((1, 2)), 0.0, 1)
    assert info.value.args


def test_gamma_shape_checked():
    ker = volterra.VolterraKernel(_abel_kernel)
    with pytest.raises(DomainError):
        volterra.solve_volterra(ker, np.ones(4), np.linspace(0, 1, 5))


# source term

def test_gamma_zero_initial_data():
    p = wkb.WkbDensity(np.array([[0.04]]), np.array([0.01]), 1)
    assert volterra.gamma(p, lambda y: np.zeros(len(y)), 0.3, np.zeros(0), quad.QuadratureRule(), 7.5) == 7.5


def test_gamma_gaussian_bump_closed_form():
    """[DERIVED] Gaussian times Gaussian: the derivative weight is linear in y, both moments in closed form."""
    a, b, dt = 1.0, 0.2, 1.0
    centre, width = 2.0, 0.3
    p = wkb.WkbDensity(np.array([[a]]), np.array([b]), 1)
    bump = lambda y: np.exp(-((y[..., 0] - centre) ** 2) / (2 * width**2))
    # p(y) bump(y) = C N(y; m, v)
    v = 1 / (1 / (a * dt) + 1 / width**2)
    m = v * (b * dt / (a * dt) + centre / width**2)
    C = np.sqrt(v / (a * dt)) * np.exp(-0.5 * ((b * dt) ** 2 / (a * dt) + centre**2 / width**2 - m**2 / v))
    # dp/dx = p (y - x - b dt) / (a dt) at x = 0
    exact = C * ((m - b * dt) / (a * dt) - 1.0)
    got = volterra.gamma(p, bump, dt, np.zeros(0), quad.QuadratureRule(nodes=96), 0.0)
    assert got == pytest.approx(exact, rel=1e-6)


def test_gamma_short_time_limit():
    """Half of the Gaussian family lies outside the domain, so the regular part tends to (f' - f) / 2."""
    a = 0.04
    p = wkb.WkbDensity(np.array([[a]]), np.array([0.01]), 1)
    f = lambda y: np.sin(2 * y[..., 0]) + 0.3
    dt = 1e-3
    g = volterra.gamma(p, f, dt, np.zeros(0), quad.QuadratureRule(nodes=32), 0.0)
    # boundary layer term f(0) p(0) diverges like dt^(-1/2)
    regular = g - 0.3 / np.sqrt(2 * np.pi * a * dt)
    assert regular == pytest.approx(0.5 * (2.0 - 0.3), rel=0.05)


def test_boundary_density_csv(tmp_path):
    from freebound.frontfix import zeta_from_xhat

    t = np.linspace(0, 1, 3)
    axis = zeta_from_xhat(np.array([[0.25], [0.5], [0.75]]))[:, 0]
    bd = volterra.BoundaryDensity(t, (axis,), np.arange(9.0).reshape(3, 3))
    path = tmp_path / "phi.csv"
    bd.to_csv(path, header={"mode": "u"})
    lines = path.read_text().splitlines()
    assert lines[0] == "# mode=u"
    assert lines[1] == "tau,x2,phi,phi_zeta"
    assert len(lines) == 2 + 9
    row = [float(v) for v in lines[3].split(",")]
    assert row[0] == 0.0 and row[1] == pytest.approx(0.5) and row[3] == 1.0
