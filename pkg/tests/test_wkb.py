import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal

from freebound import wkb
from freebound.errors import DomainError, EllipticityError

from _fd import grad as fd_grad, hess as fd_hess


def _metric(t, x):
    x = np.asarray(x, float)
    scale = 1.0 + 0.4 * np.sin(1.5 * x[..., 0]) * np.cos(x[..., 1])
    return scale[..., None, None] * np.array([[1.0, 0.3], [0.3, 0.6]])


# eikonal distance

def test_eikonal_identity_is_euclidean():
    d = np.array([0.3, -0.4, 1.2])
    assert wkb.eikonal_distance(np.eye(3), np.zeros(3), d) == pytest.approx(np.dot(d, d), rel=1e-15)


def test_eikonal_diagonal_metric():
    a = np.diag([4.0, 0.25])
    d = np.array([1.0, 0.5])
    assert wkb.eikonal_distance(a, np.zeros(2), d) == pytest.approx(1.0 / 4.0 + 0.25 / 0.25, rel=1e-15)


@pytest.mark.parametrize("policy", wkb.POLICIES)
def test_eikonal_residual_vanishes_for_constant_metric(policy):
    rng = np.random.default_rng(3)
    a = np.array([[1.0, 0.3], [0.3, 0.6]])
    x = rng.normal(size=(50, 2))
    y = rng.normal(size=(50, 2))
    assert np.max(wkb.eikonal_residual(a, x, y, policy)) < 1e-10


def test_eikonal_singular_metric_rejected():
    with pytest.raises(EllipticityError):
        wkb.eikonal_distance(np.zeros((2, 2)), np.zeros(2), np.ones(2))


# squared geodesic distances from the origin for the metric in ``_metric``,
# by Dijkstra on a 241 x 241 lattice over [-0.6, 0.6]^2 with edge offsets up to 6
LATTICE_D2 = {
    (0.3, 0.2): 0.10472754724298464,
    (-0.25, 0.35): 0.44832259670476027,
    (0.45, -0.1): 0.2758564594763003,
    (-0.4, -0.25): 0.21906108732960097,
    (0.1, -0.45): 0.44794903404944414,
    (0.0, 0.3): 0.17647058823529463,
    (0.2, 0.0): 0.04444863908734705,
    (-0.15, -0.15): 0.04619989998973778,
}


@pytest.mark.parametrize("point", sorted(LATTICE_D2))
def test_eikonal_matches_lattice_geodesic(point):
    """[DERIVED] frozen shortest-path values; the ray-averaged policy stays within 2%."""
    d2 = wkb.eikonal_distance(_metric, np.array(point), np.zeros(2), policy="taylor-1")
    assert abs(d2 / LATTICE_D2[point] - 1.0) < 0.02


@pytest.mark.slow
def test_lattice_geodesic_reproduces_frozen_values():
    gx, gy, dist = wkb.lattice_geodesic(_metric, (-0.6, -0.6), (0.6, 0.6), 241, (0.0, 0.0), radius=6)
    for (px, py), ref in LATTICE_D2.items():
        i = int(np.argmin(np.abs(gx - px)))
        j = int(np.argmin(np.abs(gy - py)))
        assert dist[i, j] ** 2 == pytest.approx(ref, rel=1e-12)


# transport coefficients

def test_c0_vanishes_for_standard_heat_kernel():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(2, 20, 3))
    np.testing.assert_array_equal(wkb.c0(np.eye(3), np.zeros(3), x, y), 0.0)


def test_c0_constant_drift_is_tilt():
    """[DERIVED] exponent of (2 pi t)^(-1/2) exp(-(y - x - b t)^2 / 2t) expanded in t."""
    b = 0.7
    x = np.array([[0.2], [1.5]])
    y = np.array([[-0.4], [0.9]])
    np.testing.assert_allclose(wkb.c0(np.eye(1), np.array([b]), x, y), -b * (x - y)[:, 0], rtol=1e-15)


def test_c0_diagonal_value_normalises_density():
    # -0.5 ln det a, which is what makes the expansion integrate to one
    assert wkb.c0(np.array([[4.0]]), np.zeros(1), np.zeros(1), np.zeros(1)) == pytest.approx(-np.log(2.0), rel=1e-15)
    w = wkb.WkbDensity(np.array([[4.0]]), np.zeros(1), 1)
    g, gw = np.polynomial.legendre.leggauss(200)
    y = 20.0 * g
    mass = np.dot(20.0 * gw, w.density(np.ones(200), np.zeros((200, 1)), np.zeros(200), y[:, None]))
    assert mass == pytest.approx(1.0, abs=1e-12)


def test_ck_next_zero_for_standard_heat_kernel():
    lower = [(np.zeros(4), np.zeros((4, 2)), np.zeros((4, 2, 2)))]
    np.testing.assert_array_equal(wkb.ck_next(0, lower, np.eye(2), np.zeros(2)), 0.0)


def test_ck_next_constant_drift():
    """[DERIVED] c1 = 0.5 (c0')^2 + b c0' with c0' = -b."""
    b = 0.7
    lower = [(0.0, np.array([-b]), np.zeros((1, 1)))]
    assert wkb.ck_next(0, lower, np.eye(1), np.array([b])) == pytest.approx(-b * b / 2, rel=1e-15)


def test_ck_next_rejects_excess_order():
    lower = [(0.0, np.zeros(1), np.zeros((1, 1)))] * 3
    with pytest.raises(DomainError):
        wkb.ck_next(2, lower, np.eye(1), np.zeros(1))


# Crank-Nicolson Fokker-Planck solution for a = 0.5, b(y) = 0.2 - y started at x = 0.3,
# evaluated at dt = 0.05 (grid step 1e-3, time step 1e-5)
OU_DT = 0.05
OU_FD = {
    -0.17: 0.02742261, -0.01: 0.36554502, 0.14: 1.559808, 0.22: 2.2971939, 0.295: 2.5864776,
    0.37: 2.2989766, 0.45: 1.5623101, 0.6: 0.36669886, 0.76: 0.027554506,
}


def _ou_drift(t, x):
    return 0.2 - 1.0 * np.asarray(x, float)


@pytest.mark.parametrize("policy", wkb.POLICIES)
def test_linear_drift_second_order_matches_finite_differences(policy):
    """[DERIVED] truncation at order two against a dense finite-difference solve."""
    ys = np.array(sorted(OU_FD))
    ref = np.array([OU_FD[k] for k in sorted(OU_FD)])
    w = wkb.WkbDensity(np.array([[0.5]]), _ou_drift, 1, order=2, policy=policy)
    got = w.density(np.full(len(ys), OU_DT), np.full((len(ys), 1), 0.3), np.zeros(len(ys)), ys[:, None])
    assert np.max(np.abs(got - ref)) / ref.max() < 1e-3


def test_linear_drift_error_shrinks_with_order():
    ys = np.array(sorted(OU_FD))
    ref = np.array([OU_FD[k] for k in sorted(OU_FD)])
    errs = []
    for order in range(3):
        w = wkb.WkbDensity(np.array([[0.5]]), _ou_drift, 1, order=order)
        got = w.density(np.full(len(ys), OU_DT), np.full((len(ys), 1), 0.3), np.zeros(len(ys)), ys[:, None])
        errs.append(np.max(np.abs(got - ref)) / ref.max())
    assert errs[0] > 10 * errs[1] > 10 * errs[2] * 0.5
    assert errs[2] < errs[1]


def test_linear_drift_oracle_agrees_with_closed_form():
    """The frozen finite-difference values against the Ornstein-Uhlenbeck transition density."""
    decay = np.exp(-OU_DT)
    mean = 0.3 * decay + 0.2 * (1 - decay)
    var = 0.5 * (1 - decay**2) / 2
    for y, ref in OU_FD.items():
        exact = np.exp(-(y - mean) ** 2 / (2 * var)) / np.sqrt(2 * np.pi * var)
        assert ref == pytest.approx(exact, rel=2e-5, abs=2e-6)


# density

def test_standard_normal_peak():
    w = wkb.WkbDensity(np.eye(1), np.zeros(1), 1)
    assert w.density(1.0, np.zeros(1), 0.0, np.zeros(1)) == pytest.approx(0.3989422804, rel=1e-10)


def test_drifted_gaussian_exact():
    w = wkb.WkbDensity(np.eye(1), np.array([0.3]), 1, order=1)
    x = np.linspace(-1, 1, 9)[:, None]
    y = np.linspace(-0.5, 1.5, 9)[:, None]
    ref = np.exp(-((y - x - 0.3 * 0.5) ** 2)[:, 0] / (2 * 0.5)) / np.sqrt(2 * np.pi * 0.5)
    np.testing.assert_allclose(w.density(np.full(9, 0.5), x, np.zeros(9), y), ref, rtol=1e-12)


@pytest.mark.parametrize("order", [1, 2])
def test_constant_coefficients_exact_in_several_dimensions(order):
    rng = np.random.default_rng(11)
    a = np.array([[0.04, 0.012, 0.0], [0.012, 0.09, 0.01], [0.0, 0.01, 0.05]])
    b = np.array([0.03, -0.02, 0.01])
    w = wkb.WkbDensity(a, b, 3, order=order)
    x = rng.normal(size=(200, 3)) * 0.3
    dt = rng.uniform(0.01, 1.0, 200)
    y = x + rng.normal(size=(200, 3)) * 0.3 * np.sqrt(dt)[:, None]
    ref = np.array([multivariate_normal(x[i] + b * dt[i], a * dt[i]).logpdf(y[i]) for i in range(200)])
    assert np.max(np.abs(np.expm1(w.log_density(dt, x, np.zeros(200), y) - ref))) < 1e-12


@pytest.mark.parametrize("dt", [0.01, 0.05, 0.1])
def test_density_integrates_to_one(dt):
    a = np.array([[0.04, 0.01], [0.01, 0.09]])
    b = np.array([0.03, -0.02])
    w = wkb.WkbDensity(a, b, 2)
    x = np.array([0.1, -0.2])
    mean, cov = w.moments(dt, x, 0.0)
    sd = np.sqrt(np.diag(cov))
    g, gw = np.polynomial.legendre.leggauss(48)
    axes = [m + 10 * s * g for m, s in zip(mean, sd)]
    wts = [10 * s * gw for s in sd]
    P = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 2)
    W = np.outer(*wts).ravel()
    mass = np.dot(W, w.density(np.full(len(P), dt), np.broadcast_to(x, P.shape), np.zeros(len(P)), P))
    assert mass == pytest.approx(1.0, abs=1e-3)


def test_density_rejects_reversed_times():
    w = wkb.WkbDensity(np.eye(1), np.zeros(1), 1)
    with pytest.raises(DomainError):
        w.density(0.5, np.zeros(1), 0.5, np.zeros(1))
    with pytest.raises(DomainError):
        w.density(0.4, np.zeros(1), 0.5, np.zeros(1))


def test_constructor_rejects_bad_options():
    with pytest.raises(DomainError):
        wkb.WkbDensity(np.eye(1), np.zeros(1), 1, order=3)
    with pytest.raises(DomainError):
        wkb.WkbDensity(np.eye(1), np.zeros(1), 1, policy="spline")


# derivatives

def test_gradient_at_peak_vanishes_without_drift():
    w = wkb.WkbDensity(np.eye(2), np.zeros(2), 2)
    der = w.density_derivatives(0.3, np.array([0.4, -0.1]), 0.0, np.array([0.4, -0.1]))
    np.testing.assert_array_equal(der.grad, 0.0)
    assert der.dx1 == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_derivatives_against_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = np.array([[0.05, 0.01], [0.01, 0.08]])
    b = np.array([0.02, -0.03])
    w = wkb.WkbDensity(a, b, 2)
    dt = rng.uniform(0.1, 1.0)
    x = rng.normal(size=2) * 0.2
    y = x + rng.normal(size=2) * 0.2 * np.sqrt(dt)
    der = w.density_derivatives(dt, x, 0.0, y)

    def f(z):
        return float(w.density(dt, z, 0.0, y))

    h = 1e-5
    g = fd_grad(f, x, h)
    H = fd_hess(f, x, 1e-3)
    assert np.max(np.abs(g - der.grad)) / np.max(np.abs(der.grad)) < 1e-6
    assert np.max(np.abs(H - der.hess)) / np.max(np.abs(der.hess)) < 1e-4
    ft = (w.density(dt + h, x, 0.0, y) - w.density(dt - h, x, 0.0, y)) / (2 * h)
    assert ft == pytest.approx(der.dt, rel=1e-6)
    assert der.dx1 == der.grad[0]


def test_heat_residual_shrinks_with_order():
    rng = np.random.default_rng(5)
    a = np.array([[0.05, 0.01], [0.01, 0.08]])
    b = np.array([0.2, -0.3])
    x = rng.normal(size=(40, 2)) * 0.2
    y = x + rng.normal(size=(40, 2)) * 0.1
    dt = np.full(40, 0.2)
    res = [np.max(np.abs(wkb.WkbDensity(a, b, 2, order=m).heat_residual(dt, x, np.zeros(40), y)
                         / wkb.WkbDensity(a, b, 2, order=m).density(dt, x, np.zeros(40), y)))
           for m in range(3)]
    assert res[0] > 1e-2
    assert res[1] < 1e-10 and res[2] < 1e-10


def test_pde_residual_improves_with_order_for_variable_coefficients():
    w0 = wkb.WkbDensity(np.array([[0.5]]), _ou_drift, 1, order=0)
    w1 = wkb.WkbDensity(np.array([[0.5]]), _ou_drift, 1, order=1)
    x = np.linspace(-0.3, 0.5, 9)[:, None]
    y = x + 0.05
    r0 = np.max(wkb.pde_residual(w0, np.full(9, 0.02), x, y))
    r1 = np.max(wkb.pde_residual(w1, np.full(9, 0.02), x, y))
    assert r1 < 0.2 * r0


# properties

def _chapman_kolmogorov_error(w, dt, x, y):
    mid = 0.5 * dt
    g, gw = np.polynomial.legendre.leggauss(200)
    centre = 0.5 * (x + y)
    half = 12 * np.sqrt(dt)
    z = centre + half * g
    left = w.density(np.full(200, dt), np.full((200, 1), x), np.full(200, mid), z[:, None])
    right = w.density(np.full(200, mid), z[:, None], np.zeros(200), np.full((200, 1), y))
    two_step = np.dot(half * gw, left * right)
    return abs(two_step / w.density(dt, np.array([x]), 0.0, np.array([y])) - 1.0)


def test_chapman_kolmogorov_error_shrinks_with_step():
    w = wkb.WkbDensity(np.array([[0.5]]), _ou_drift, 1, order=1)
    errs = [_chapman_kolmogorov_error(w, dt, 0.3, 0.35) for dt in (0.2, 0.1, 0.05)]
    assert errs[0] < 1e-2
    assert errs[0] > 3 * errs[1] > 9 * errs[2]


def test_chapman_kolmogorov_exact_for_constant_coefficients():
    w = wkb.WkbDensity(np.array([[0.5]]), np.array([0.2]), 1, order=1)
    assert _chapman_kolmogorov_error(w, 0.1, 0.3, 0.4) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.01, 1.0), st.floats(0.05, 2.0), st.floats(-1, 1))
def test_density_positive(x, y, dt, vol, slope):
    a = lambda t, z: (vol * (1 + 0.3 * np.tanh(np.asarray(z)[..., :1, None]))) ** 2
    b = lambda t, z: slope * np.asarray(z)
    for policy in wkb.POLICIES:
        w = wkb.WkbDensity(a, b, 1, order=1, policy=policy)
        logp = w.log_density(dt, np.array([x]), 0.0, np.array([y]))
        assert np.isfinite(logp)
        if logp > -700:
            assert w.density(dt, np.array([x]), 0.0, np.array([y])) > 0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4), st.floats(0.01, 1.0), st.floats(-0.5, 0.5))
def test_symmetric_without_drift(pts, dt, rho):
    a = np.array([[0.04, 0.06 * rho], [0.06 * rho, 0.09]])
    w = wkb.WkbDensity(a, np.zeros(2), 2, order=2)
    x, y = np.array(pts[:2]), np.array(pts[2:])
    assert w.density(dt, x, 0.0, y) == pytest.approx(w.density(dt, y, 0.0, x), rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1, 1), st.floats(-1, 1))
def test_distance_positive_off_diagonal(u, v):
    x = np.array([u, v])
    assert wkb.eikonal_distance(_metric, x, x) == 0.0
    y = x + np.array([0.1, -0.05])
    for policy in wkb.POLICIES:
        assert wkb.eikonal_distance(_metric, x, y, policy) > 0


# audit suite

def test_invariant_suite_constant_coefficients_all_pass():
    a = np.array([[0.04, 0.0], [0.0, 0.04]])
    b = np.array([0.03, 0.03])
    checks, samples = wkb.invariant_suite(a, b, 2, np.zeros(2), points=200)
    assert all(c.applicable for c in checks)
    assert all(c.passed for c in checks), [(c.name, c.value) for c in checks if not c.passed]
    assert len(samples) == 200


def test_invariant_suite_variable_coefficients_gates_only_applicable_checks():
    a, b = wkb.log_price_coefficients(lambda t, s: 0.04 * np.ones(np.shape(s)[:-1] + (1, 1)) * (s[..., :1, None] / 50) ** -0.6,
                                      lambda t, s: 0.05, 1)
    checks, _ = wkb.invariant_suite(a, b, 1, np.array([np.log(50.0)]), points=100)
    names = {c.name: c for c in checks}
    assert not names["gaussian_exactness"].applicable
    assert names["order_improvement"].applicable
    assert names["order_improvement"].value < 1.0


def test_checks_csv_round_trip(tmp_path):
    checks = [wkb.AuditCheck("a", 0.5, 1.0), wkb.AuditCheck("b", 2.0, 1.0, applicable=False)]
    path = tmp_path / "checks.csv"
    wkb.write_checks_csv(path, checks, header={"seed": 0})
    lines = path.read_text().splitlines()
    assert lines[0] == "# seed=0"
    assert lines[2].endswith("True,True") and lines[3].endswith("False,True")
