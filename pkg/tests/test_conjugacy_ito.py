import numpy as np
import pytest

from levy_rds import (
    ItoCohomology,
    LevyTriplet,
    UniformBall,
    build_cohomology,
    check_fubini_formula,
    ito_ventzell_residual,
    linear_system,
    make_grid,
    sample_path,
    scalar_system,
    solve_h,
    verify_conjugacy_ito,
)
from levy_rds._validation import RangeError, rate_fit
from levy_rds.conjugacy_ito import (
    ProcessSpec,
    RandomFieldSpec,
    invert_H,
    sde_identity_residual,
    solve_D,
    solve_h_time_changed,
    stationarity_check,
    transformed_drift,
)
from levy_rds.levy_paths import stationary_exp_integral

ANCHORS = [-1.0, 0.0, 1.0]


def additive(c=0.7):
    return scalar_system(lambda x: -x, lambda x: -np.ones_like(x), lambda x: c + 0 * x, lambda x: 0 * x)


def test_additive_closed_form(jump_path):
    # on the path lattice both routes sum the same weighted increments
    g = make_grid(jump_path, 0.0, 1.0)
    fld = build_cohomology(additive(), jump_path, ANCHORS, g, 20.0)
    for t in (0.0, 0.37, 1.0):
        ou = 0.7 * stationary_exp_integral(jump_path, 1.0, t, 20.0)[0]
        H = fld.H(t, np.array([[0.3]]))[0, 0]
        assert H == pytest.approx(0.3 + ou, abs=1e-10)
        assert fld.Gamma(t, np.array([[0.3]]))[0, 0] == pytest.approx(-ou, abs=1e-10)
        assert fld.dH_dx(t, np.array([[0.3]]))[0, 0, 0] == pytest.approx(1.0, abs=1e-12)


def test_zero_noise_identity(jump_path):
    sys_ = scalar_system(lambda x: -x, lambda x: -np.ones_like(x), lambda x: 0 * x, lambda x: 0 * x)
    fld = build_cohomology(sys_, jump_path, ANCHORS, make_grid(jump_path, 0.0, 1.0, 1e-2), 20.0)
    x = np.array([[0.2], [-0.9]])
    assert np.array_equal(fld.H(0.5, x), x)
    assert np.all(fld.Gamma(0.5, x) == 0.0)
    assert np.allclose(transformed_drift(fld, sys_, 0.5, x), -x)


def test_picard_and_time_change_agree(jump_path):
    sys_ = scalar_system(lambda x: -x, lambda x: -np.ones_like(x), lambda x: np.sin(x), lambda x: np.cos(x))
    g = make_grid(jump_path, 0.0, 1.0, 1e-2)
    ivp = solve_h(sys_, jump_path, [0.4], 0.5, g, 20.0)
    pic = solve_h(sys_, jump_path, [0.4], 0.5, g, 20.0, method="picard")
    assert np.max(np.abs(ivp.states - pic.states)) <= 1e-9
    tc = solve_h_time_changed(sys_, jump_path, [0.4], 0.5, g, 20.0)
    assert np.max(np.abs(ivp.final - tc[-1])) <= 1e-6


def test_inversion_round_trip(jump_path):
    sys_ = linear_system([[-0.5]], [[[1.0]]])
    fld = build_cohomology(sys_, jump_path, np.linspace(-3, 3, 13), make_grid(jump_path, 0.0, 1.0, 1e-2), 20.0)
    for y in (-1.3, 0.0, 0.8):
        x = invert_H(fld, 0.4, [y])
        assert fld.H(0.4, x)[0] == pytest.approx(y, abs=1e-9)


def test_tail_must_fit_path(jump_path):
    with pytest.raises(RangeError):
        build_cohomology(additive(), jump_path, ANCHORS, make_grid(jump_path, 0.0, 1.0, 1e-2), 40.0)


def test_stationarity(jump_path):
    assert stationarity_check(additive(), jump_path, ANCHORS, 1.0, 1.0, 20.0, step=1e-2) <= 1e-9


def test_sde_identity_linear(jump_path):
    fld = build_cohomology(linear_system([[-0.5]], [[[1.0]]]), jump_path, ANCHORS,
                           make_grid(jump_path, 0.0, 1.0, 1e-3), 20.0)
    assert sde_identity_residual(fld).max <= 5e-2


def test_conjugacy_converges(jump_triplet):
    sys_ = linear_system([[-0.5]], [[[1.0]]])
    steps = [4e-3, 2e-3, 1e-3]
    rows = []
    for seed in range(3):
        p = sample_path(jump_triplet, (-22.0, 2.0), 2.5e-4, 40 + seed)
        rows.append([verify_conjugacy_ito(sys_, p, [0.7], make_grid(p, 0.0, 1.0, h), 20.0).max for h in steps])
    med = np.median(rows, axis=0)
    assert rate_fit(steps, med) >= 0.4 and med[-1] <= 1e-2


def test_estimator(jump_path):
    est = ItoCohomology(system=additive(), anchors=ANCHORS, step=1e-2).fit(jump_path)
    x = np.array([[0.25], [-0.5]])
    assert np.allclose(est.inverse_transform(est.transform(x, t=0.3), t=0.3), x, atol=1e-9)


def test_ito_ventzell_single_jump_exact():
    tri = LevyTriplet(1, [0.0], [[0.0]], 1.0, UniformBall(1.0, 1))
    p = sample_path(tri, (0.0, 1.0), 1e-2, 0, forced_jumps=[(0.5, [0.3])])
    xi = RandomFieldSpec.polynomial([0.1, 1.0, 0.5], G=[0.0, 0.4, 0.0])
    eta = ProcessSpec(lambda x: 0.0, lambda x: 0.0, lambda x, u: u * (1 + x), 0.2)
    assert ito_ventzell_residual(xi, eta, p, make_grid(p, 0.0, 1.0)).max <= 1e-13


def test_ito_ventzell_second_order_matters():
    tri = LevyTriplet(1, [0.0], [[1.0]], 2.0, UniformBall(0.3, 1))
    p = sample_path(tri, (0.0, 1.0), 1e-4, 3)
    xi = RandomFieldSpec.polynomial([0.0, 0.5, 1.0], E=[0.1, 0, 0], F=[0.0, 0.3, 0.0])
    eta = ProcessSpec(lambda x: -x, lambda x: 0.5 + 0 * x, lambda x, u: u, 0.4)
    g = make_grid(p, 0.0, 1.0, 1e-3)
    full = ito_ventzell_residual(xi, eta, p, g).max
    dropped = ito_ventzell_residual(xi, eta, p, g, second_order=False).max
    assert full < dropped / 10


def test_fubini_constant_noise(jump_path):
    out = check_fubini_formula(additive(), jump_path, [0.3], 0.0, 1.0, 20.0, step=1e-2)
    assert abs(out["residual"]) <= 1e-12


def test_tau_derivative_matches_finite_difference(jump_path):
    sys_ = scalar_system(lambda x: -x, lambda x: -np.ones_like(x), lambda x: np.sin(x), lambda x: np.cos(x))
    g = make_grid(jump_path, 0.0, 1.0, 1e-2)
    res = solve_h(sys_, jump_path, [0.4], 0.5, g, 20.0, with_D=True)
    eps = 1e-5
    up = solve_h(sys_, jump_path, [0.4], 0.5 + eps, g, 20.0).states
    dn = solve_h(sys_, jump_path, [0.4], 0.5 - eps, g, 20.0).states
    fd = (up - dn) / (2 * eps)
    assert np.max(np.abs(res.meta["D"] - fd)) <= 1e-7
    assert np.allclose(solve_D(sys_, jump_path, [0.4], 0.5, res, g, 20.0), res.meta["D"], atol=1e-12)
