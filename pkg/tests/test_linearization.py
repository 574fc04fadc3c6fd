import math

import numpy as np
import pytest

from levy_rds import (
    HypothesisError,
    LevyTriplet,
    LinearSystem,
    LyapunovSpectrumEstimator,
    UniformBall,
    build_cohomology,
    integrate_ito,
    integrate_linear,
    linear_system,
    linearize,
    lyapunov_exponents,
    make_grid,
    scalar_example_suite,
    scalar_system,
    verify_step2_conjugacy,
)
from levy_rds.linearization import (
    linearized_rde_coefficient,
    rde_coefficient_by_differentiation,
    scalar_example_systems,
    scalar_lyapunov_oracle,
)


def test_linearize_scalar_example():
    _, lin, beta = scalar_example_systems(-0.5, 0.4, 3)
    assert beta == pytest.approx(-0.42)
    assert lin.B0[0, 0] == pytest.approx(-0.42)
    assert lin.Bs[0, 0, 0] == 1.0


def test_linearize_analytic_matches_fd():
    sys_ = scalar_system(lambda x: np.sin(x) - x**2, lambda x: np.cos(x) - 2 * x, lambda x: np.tanh(x), lambda x: 1 / np.cosh(x) ** 2)
    a, b = linearize(sys_), linearize(sys_, analytic=False)
    assert np.allclose(a.B0, b.B0, atol=1e-8) and np.allclose(a.Bs, b.Bs, atol=1e-8)


def test_linearize_requires_fixed_point():
    with pytest.raises(HypothesisError):
        linearize(scalar_system(lambda x: 1 + x, lambda x: np.ones_like(x), lambda x: x, lambda x: np.ones_like(x)))


def test_linear_flow_homogeneity(jump_path):
    lin = LinearSystem([[-0.3]], [[[0.8]]])
    g = make_grid(jump_path, 0.0, 1.0, 1e-3)
    a = integrate_linear(lin, jump_path, [1.0], g).states
    b = integrate_linear(lin, jump_path, [2.5], g).states
    assert np.allclose(b, 2.5 * a, rtol=1e-13)


def test_scalar_product_formula_vs_euler(jump_path):
    lin = LinearSystem([[-0.3]], [[[0.8]]])
    g = make_grid(jump_path, 0.0, 1.0)
    exact = integrate_linear(lin, jump_path, [1.0], g).states[:, 0]
    euler = integrate_ito(lin.to_system(), jump_path, [1.0], g).states[:, 0]
    assert np.max(np.abs(exact - euler)) < 5e-2


def test_rde_coefficient_two_ways(jump_path):
    sys_, lin, _ = scalar_example_systems(-0.5, 0.4, 3)
    g = make_grid(jump_path, 0.0, 0.5, 1e-2)
    fld = build_cohomology(sys_, jump_path, np.linspace(-0.2, 0.2, 9), g, 20.0)
    for t in (0.0, 0.25, 0.5):
        a = linearized_rde_coefficient(fld, lin, t)
        b = rde_coefficient_by_differentiation(fld, sys_, t)
        assert np.allclose(a, b, atol=1e-4)


def test_step2_linear_residual_small(jump_path):
    sys_, lin, _ = scalar_example_systems(-0.5, 0.4, 3)
    fld = build_cohomology(lin.to_system(), jump_path, [-1.0, 0.0, 1.0], make_grid(jump_path, 0.0, 1.0, 1e-3), 20.0)
    assert verify_step2_conjugacy(fld, lin, jump_path, [0.5]).max < 5e-2


def test_lyapunov_drift_only_exact():
    tri = LevyTriplet(1, [0.2], [[0.0]])
    spec = lyapunov_exponents(LinearSystem([[-0.3]], [[[1.0]]]), tri, 10.0, 1e-2, 3, seed=0)
    assert np.allclose(spec.samples, -0.1, atol=1e-12)


def test_lyapunov_oracle_agreement():
    tri = LevyTriplet(1, [0.1], [[0.0]], 1.0, UniformBall(0.5, 1))
    lin = LinearSystem([[-0.3]], [[[1.0]]])
    spec = lyapunov_exponents(lin, tri, 200.0, 1e-2, 50, seed=1)
    oracle = scalar_lyapunov_oracle(-0.3, tri)
    assert abs(spec.exponents[0] - oracle) <= 4 * spec.standard_errors[0]


def test_lyapunov_2d_diagonal():
    tri = LevyTriplet(1, [0.0], [[0.0]])
    lin = LinearSystem([[-0.2, 0.0], [0.0, -1.0]], [[[0.0, 0.0], [0.0, 0.0]]])
    spec = lyapunov_exponents(lin, tri, 20.0, 1e-2, 2, seed=0)
    # Euler factors (1 - c dt) per step
    expect = np.array([math.log(1 - 0.2e-2), math.log(1 - 1e-2)]) / 1e-2
    assert np.allclose(spec.exponents, expect, atol=1e-10)
    assert spec.hyperbolic


def test_lyapunov_worker_independent():
    tri = LevyTriplet(1, [0.1], [[0.3]])
    lin = LinearSystem([[-0.3]], [[[1.0]]])
    a = lyapunov_exponents(lin, tri, 5.0, 1e-2, 4, seed=3)
    b = lyapunov_exponents(lin, tri, 5.0, 1e-2, 4, seed=3, workers=2)
    assert np.array_equal(a.samples, b.samples)


def test_estimator_api():
    tri = LevyTriplet(1, [0.2], [[0.0]])
    est = LyapunovSpectrumEstimator(triplet=tri, T=5.0, n_samples=2).fit(linear_system([[-0.3]], [[[1.0]]]))
    assert est.score() == pytest.approx(-0.1)


def test_scalar_suite(jump_path):
    g = make_grid(jump_path, 0.0, 1.0, 1e-3)
    rep = scalar_example_suite(-0.5, 0.4, 3, jump_path, g)
    assert rep.fixed_point_ok and rep.monotone
    assert rep.ratios[-1] < 1e-6
    assert "not constructed" in rep.text()


def test_zero_system_not_hyperbolic():
    tri = LevyTriplet(1, [0.2], [[0.0]])
    spec = lyapunov_exponents(LinearSystem([[0.0]], [[[0.0]]]), tri, 5.0, 1e-2, 3, seed=0)
    assert np.all(spec.exponents == 0.0)
    assert not spec.hyperbolic
