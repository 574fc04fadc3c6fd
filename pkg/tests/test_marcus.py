import math

import numpy as np
import pytest

from levy_rds import (
    FlowMap,
    HypothesisError,
    LevyTriplet,
    MarcusCocycle,
    MarcusCohomology,
    UniformBall,
    cocycle_check,
    integrate_marcus,
    make_grid,
    ou_path,
    sample_path,
    shift,
    verify_conjugacy_marcus,
)
from levy_rds._validation import rate_fit
from levy_rds.levy_paths import stationary_exp_integral
from levy_rds.marcus import (
    build_marcus_cohomology,
    lie_bracket_check,
    linear_marcus_system,
    pseudo_inverse_formula,
    scalar_cubic_marcus,
    transformed_drift_marcus,
)


def scalar_map(s=1.0):
    return FlowMap.closed_form_linear([[[s]]])


def test_phi_identity_and_exponential():
    fm = scalar_map(0.7)
    x = np.array([[1.3], [-0.4]])
    assert np.array_equal(fm.phi(np.zeros(1), x), x)
    assert np.allclose(fm.phi(np.array([0.5]), x), x * math.exp(0.35))
    assert np.allclose(fm.inverse(np.array([0.5]), fm.phi(np.array([0.5]), x)), x)


def test_group_property_commuting():
    S = np.array([[[0.0, 0.0], [0.5, 0.0]], [[0.0, 0.0], [0.0, 0.0]]])
    b = np.array([[0.0, 0.0], [0.0, 0.5]])
    fm = FlowMap.closed_form_linear(S, b)
    x = np.array([[0.3, -1.2]])
    z, w = np.array([0.4, -0.7]), np.array([-1.1, 0.2])
    assert np.allclose(fm.phi(z + w, x), fm.phi(z, fm.phi(w, x)), atol=1e-13)


def test_non_commuting_rejected():
    S = np.array([[[0.0, -1.0], [1.0, 0.0]], [[0.0, 1.0], [0.0, 0.0]]])
    with pytest.raises(HypothesisError):
        FlowMap.closed_form_linear(S)


def test_numeric_ode_matches_closed_form():
    S = np.array([[[0.3, 0.1], [0.1, 0.2]], [[0.6, 0.2], [0.2, 0.4]]])  # S2 = 2 S1: commuting
    b = np.zeros((2, 2))
    cf = FlowMap.closed_form_linear(S, b)
    noise = lambda x: np.einsum("ikl,...l->...ki", S, x)
    noise_jac = lambda x: np.broadcast_to(np.transpose(S, (1, 0, 2)), x.shape[:-1] + (2, 2, 2))
    num = FlowMap.numeric_ode(noise, noise_jac, 2, 2, n_sub=32)
    x = np.array([[0.5, -0.3], [1.0, 2.0]])
    z = np.array([0.4, -0.2])
    assert np.max(np.abs(cf.phi(z, x) - num.phi(z, x))) <= 1e-8
    assert np.max(np.abs(cf.jac(z, x) - num.jac(z, x))) <= 1e-8


def test_lie_brackets():
    S = np.array([[[0.0, -1.0], [1.0, 0.0]], [[0.0, 1.0], [0.0, 0.0]]])
    noise = lambda x: np.einsum("ikl,...l->...ki", S, x)
    noise_jac = lambda x: np.broadcast_to(np.transpose(S, (1, 0, 2)), x.shape[:-1] + (2, 2, 2))
    pts = np.array([[1.0, 0.5], [-0.3, 2.0]])
    assert lie_bracket_check(noise, noise_jac, pts) > 0.1
    one = lambda x: x[..., None]
    assert lie_bracket_check(one, lambda x: np.ones(x.shape + (1, 1)), [[0.5], [1.0]]) == 0.0


def test_chain_rule_exact_for_jumps_and_drift():
    tri = LevyTriplet(1, [0.5], [[0.0]], 3.0, UniformBall(0.5, 1))
    p = sample_path(tri, (0.0, 1.0), 1e-3, 3)
    g = make_grid(p, 0.0, 1.0, 1e-3)
    sys_ = linear_marcus_system(lambda x: 0 * x, lambda x: np.zeros(x.shape + (1,)), [[[1.0]]])
    out = integrate_marcus(sys_, p, [2.0], g)
    exact = 2.0 * np.exp(g.values()[:, 0])
    assert np.max(np.abs(out.states[:, 0] - exact) / exact) <= 1e-3


def test_marcus_jump_is_exponential_not_linear():
    tri = LevyTriplet(1, [0.0], [[0.0]], 1.0, UniformBall(1.0, 1))
    p = sample_path(tri, (0.0, 1.0), 1e-2, 0, forced_jumps=[(0.5, [0.4])])
    sys_ = linear_marcus_system(lambda x: 0 * x, lambda x: np.zeros(x.shape + (1,)), [[[1.0]]])
    out = integrate_marcus(sys_, p, [1.0], make_grid(p, 0.0, 1.0))
    assert out.at(0.5)[0] == pytest.approx(math.exp(0.4), abs=1e-13)
    assert out.at(0.5)[0] != pytest.approx(1.4)


def test_ou_integral_and_recursion(jump_path):
    g = make_grid(jump_path, 0.0, 2.0, 1e-3)
    ou = ou_path(jump_path, 1.0, g, 20.0)
    for t in (0.0, 0.77, 2.0):
        assert np.max(np.abs(ou.at(t) - stationary_exp_integral(jump_path, 1.0, t, 20.0))) <= 1e-10


def test_ou_drift_fixed_point(drift_path):
    g = make_grid(drift_path, 0.0, 1.0, 1e-2)
    ou = ou_path(drift_path, 2.0, g, 20.0)
    assert np.max(np.abs(ou.Z[:, 0] - 0.5)) <= math.exp(-2.0 * 20.0) + 1e-12


def test_ou_sde_form_residual_is_second_order():
    tri = LevyTriplet(1, [0.3], [[0.0]], 2.0, UniformBall(0.5, 1))
    p = sample_path(tri, (-21.0, 1.0), 2.5e-4, 0)
    res = []
    steps = [1e-2, 5e-3, 2.5e-3]
    for h in steps:
        g = make_grid(p, 0.0, 1.0, h)
        ou = ou_path(p, 1.0, g, 20.0)
        Z = ou.Z[:, 0]
        r = Z[1:] - Z[:-1] + 1.0 * Z[:-1] * np.diff(g.nodes) - np.diff(g.values()[:, 0])
        res.append(np.max(np.abs(r)))
    assert rate_fit(steps, res) >= 1.8


def test_ou_shift_identity(jump_path):
    g = make_grid(jump_path, 0.0, 2.0, 1e-3)
    ou = ou_path(jump_path, 1.0, g, 20.0)
    sp = shift(jump_path, 1.0)
    ou2 = ou_path(sp, 1.0, make_grid(sp, 0.0, 1.0, 1e-3), 20.0)
    gap = np.max(np.abs(np.array([ou.at(t + 1.0) for t in ou2.times]) - ou2.Z))
    assert gap <= 2 * math.exp(-20.0) * np.max(np.abs(ou.Z))


def test_cohomology_closed_form(jump_path):
    g = make_grid(jump_path, 0.0, 1.0, 1e-2)
    ou = ou_path(jump_path, 1.0, g, 20.0)
    fld = build_marcus_cohomology(scalar_map(0.6), ou)
    x = np.array([[0.5], [-1.0]])
    for t in (0.0, 0.5):
        assert np.allclose(fld.H(t, x), x * np.exp(0.6 * ou.at(t)[0]))
    quiet = sample_path(LevyTriplet(1, [0.0], [[0.0]]), (-21.0, 1.0), 1e-2, 0)
    f0 = build_marcus_cohomology(scalar_map(0.6), ou_path(quiet, 1.0, make_grid(quiet, 0, 1), 20.0))
    assert np.array_equal(f0.H(0.3, x), x)


def test_transformed_drift_scalar_display():
    sys_ = scalar_cubic_marcus(0.6)
    fm = sys_.flow_map
    y, Z, mu = np.array([[0.7]]), np.array([0.3]), 1.5
    e = math.exp(0.6 * 0.3)
    expect = (1 / e) * (-((0.7 * e) ** 3) + mu * 0.6 * 0.7 * e * 0.3)
    assert transformed_drift_marcus(fm, sys_, Z, y, mu)[0, 0] == pytest.approx(expect, rel=1e-13)
    assert transformed_drift_marcus(fm, sys_, np.zeros(1), y, mu)[0, 0] == pytest.approx(-(0.7**3))


def test_transformed_drift_affine_display():
    S = np.array([[[0.0, 0.0], [0.5, 0.0]], [[0.0, 0.0], [0.0, 0.0]]])
    b = np.array([[0.0, 0.0], [0.0, 0.5]])
    A = np.array([[-1.0, 0.3], [0.0, -2.0]])
    sys_ = linear_marcus_system(lambda x: x @ A.T, lambda x: np.broadcast_to(A, x.shape + (2,)), S, b)
    Z, y, mu = np.array([0.4, -0.3]), np.array([[0.2, 1.1]]), 1.0
    E = np.array([[1.0, 0.0], [0.5 * 0.4, 1.0]])
    x = y[0] @ E.T + b[1] * Z[1]
    expect = np.linalg.solve(E, A @ x + mu * (S[0] @ x * Z[0] + S[1] @ x * Z[1] + b[0] * Z[0] + b[1] * Z[1]))
    assert np.allclose(transformed_drift_marcus(sys_.flow_map, sys_, Z, y, mu)[0], expect, atol=1e-13)


def test_pseudo_inverse_reference_scalar():
    x, z = np.array([0.8]), np.array([0.5])
    fm = FlowMap.closed_form_linear([[[0.7]]], [[0.2]])
    ref = pseudo_inverse_formula(np.array([[0.7]]), np.array([0.2]), z, x)
    assert np.allclose(ref, fm.phi(z, x[None])[0], atol=1e-12)


def test_conjugacy_zero_at_start_and_converges():
    sys_ = scalar_cubic_marcus(1.0)
    tri = LevyTriplet(1, [0.1], [[0.5]], 1.0, UniformBall(0.5, 1))
    steps = [4e-3, 2e-3, 1e-3]
    R = []
    for seed in range(8):
        p = sample_path(tri, (-22.0, 2.0), 2.5e-4, 100 + seed)
        r = [verify_conjugacy_marcus(sys_, p, [1.0], make_grid(p, 0.0, 1.0, h), 1.0, 20.0) for h in steps]
        assert r[0].residual[0] <= 1e-14
        R.append([x.max for x in r])
    assert rate_fit(steps, np.median(R, axis=0)) >= 0.4


def test_conjugacy_without_noise_is_scheme_mismatch(drift_path):
    sys_ = linear_marcus_system(lambda x: -x, lambda x: -np.ones(x.shape + (1,)), [[[0.0]]])
    r = verify_conjugacy_marcus(sys_, drift_path, [1.0], make_grid(drift_path, 0.0, 1.0, 1e-2), 1.0, 20.0)
    # Euler global error for x' = -x is about t exp(-t) h / 2 <= 1.84e-3 at h = 1e-2
    assert r.max < 2.5e-3


def test_marcus_cocycle(jump_path):
    flow = MarcusCocycle(scalar_cubic_marcus(1.0), step=1e-3)
    assert cocycle_check(flow, jump_path, [0.4], 0.5, 0.0) == 0.0
    assert cocycle_check(flow, jump_path, [0.4], 0.5, 0.5) < 5e-2


def test_marcus_cohomology_estimator(jump_path):
    est = MarcusCohomology(flow_map=scalar_map(1.0), mu=1.0, tail_horizon=20.0, step=1e-2).fit(jump_path)
    x = np.array([[0.3], [1.2]])
    assert np.allclose(est.inverse_transform(est.transform(x, t=0.5), t=0.5), x)


def test_stratonovich_correction_scalar():
    sys_ = scalar_cubic_marcus(0.6)
    x = np.array([[0.9]])
    assert sys_.stratonovich_correction(x, np.array([[0.25]]))[0, 0] == pytest.approx(0.5 * 0.25 * 0.6 * 0.6 * 0.9)


def test_certify_flag():
    sys_ = scalar_cubic_marcus(1.0)
    assert sys_.certify(np.linspace(-1, 1, 5)[:, None]) == 0.0
    assert sys_.commutativity_certified
