import numpy as np
import pytest

from levy_rds import (
    DivergenceError,
    ItoCocycle,
    LevyTriplet,
    UniformBall,
    cocycle_check,
    integrate_ito,
    integrate_rde,
    linear_system,
    make_grid,
    sample_path,
    scalar_system,
)
from levy_rds._validation import rate_fit
from levy_rds.flows import integrate_variational
from levy_rds.harness.checks import stochastic_exponential

zero = lambda x: 0 * x
one = lambda x: 1.0 + 0 * x


def test_trivial_system_constant(jump_path):
    sys_ = scalar_system(zero, zero, zero, zero)
    g = make_grid(jump_path, 0.0, 1.0, 1e-2)
    out = integrate_ito(sys_, jump_path, [0.3], g)
    assert np.all(out.states == 0.3)


def test_additive_noise_exact(jump_path):
    sys_ = scalar_system(zero, zero, one, zero)
    g = make_grid(jump_path, 0.0, 1.0, 1e-2)
    out = integrate_ito(sys_, jump_path, [0.3], g)
    assert np.allclose(out.states[:, 0], 0.3 + g.values()[:, 0], atol=1e-12)


def test_single_jump_factor():
    tri = LevyTriplet(1, [0.0], [[0.0]], 1.0, UniformBall(1.0, 1))
    p = sample_path(tri, (0.0, 1.0), 1e-2, 0, forced_jumps=[(0.5, [0.3])])
    g = make_grid(p, 0.0, 1.0)
    out = integrate_ito(linear_system([[0.0]], [[[1.0]]]), p, [2.0], g)
    assert out.at(0.5)[0] == pytest.approx(2.6, abs=1e-14)
    assert out.at(0.49)[0] == 2.0


def test_rde_linear_second_order(drift_path):
    errs = []
    steps = [1e-1, 5e-2, 2.5e-2]
    for h in steps:
        g = make_grid(drift_path, 0.0, 1.0, h)
        out = integrate_rde(lambda t, y: -0.8 * y, drift_path, [1.5], g)
        errs.append(np.max(np.abs(out.states[:, 0] - 1.5 * np.exp(-0.8 * g.nodes))))
    assert rate_fit(steps, errs) > 1.8
    g = make_grid(drift_path, 0.0, 1.0, 1e-2)
    assert np.all(integrate_rde(lambda t, y: 0 * y, drift_path, [1.5], g).states == 1.5)


def test_rde_piecewise_constant_no_overshoot(drift_path):
    g = make_grid(drift_path, 0.0, 1.0, 1e-2)
    F = lambda t, y: np.ones_like(y) if t < 0.5 - 1e-12 else -np.ones_like(y)
    y = integrate_rde(F, drift_path, [0.0], g).states[:, 0]
    assert np.max(y) <= 0.5 + 1e-2
    assert y[-1] == pytest.approx(0.0, abs=2e-2)


def test_variational_linear_and_fd(jump_path):
    g = make_grid(jump_path, 0.0, 1.0, 1e-3)
    lin = linear_system([[0.0]], [[[1.0]]])
    v = integrate_variational(lin, jump_path, [0.8], g)
    assert np.allclose(v.jacobians[:, 0, 0], v.states[:, 0] / 0.8, rtol=1e-12)
    sysn = scalar_system(lambda x: -(x**3), lambda x: -3 * x**2, lambda x: np.sin(x), lambda x: np.cos(x))
    v = integrate_variational(sysn, jump_path, [0.8], g)
    h = 1e-4
    fd = (integrate_ito(sysn, jump_path, [0.8 + h], g).states - integrate_ito(sysn, jump_path, [0.8 - h], g).states) / (2 * h)
    rel = np.max(np.abs(fd[:, 0] - v.jacobians[:, 0, 0]) / np.abs(v.jacobians[:, 0, 0]))
    assert rel <= max(10 * 1e-3, 1e3 * h**2)


def test_identity_at_zero_time(jump_path):
    sys_ = scalar_system(lambda x: -x, lambda x: -1 + 0 * x, lambda x: x, lambda x: one(x))
    flow = ItoCocycle(sys_)
    assert cocycle_check(flow, jump_path, [0.5], 0.5, 0.0) == 0.0
    assert np.array_equal(flow(jump_path, np.array([0.5]), 0.3, 0.3), np.array([0.5]))


def test_cocycle_drift_only(drift_path):
    sys_ = scalar_system(lambda x: -x, lambda x: -1 + 0 * x, lambda x: x, lambda x: one(x))
    assert cocycle_check(ItoCocycle(sys_, step=1e-3), drift_path, [0.5], 0.5, 0.5) < 1e-12


def test_backward_inverts_forward():
    # without a Brownian part the reversed step only carries an O(dt) drift error
    tri = LevyTriplet(1, [0.1], [[0.0]], 2.0, UniformBall(0.4, 1))
    p = sample_path(tri, (0.0, 1.0), 1e-3, 5)
    sys_ = linear_system([[-0.3]], [[[0.5]]])
    errs = []
    for h in (1e-2, 1e-3):
        g = make_grid(p, 0.0, 1.0, h)
        fw = integrate_ito(sys_, p, [0.4], g)
        errs.append(abs(integrate_ito(sys_, p, fw.states[-1], g, backward=True).states[0, 0] - 0.4))
    assert errs[1] < 1e-3 and errs[1] < errs[0] / 5


def test_divergence_detection():
    tri = LevyTriplet(1, [0.0], [[0.0]])
    p = sample_path(tri, (0.0, 2.0), 1e-2, 0)
    blow = scalar_system(lambda x: x**3, lambda x: 3 * x**2, zero, zero)
    g = make_grid(p, 0.0, 2.0, 1e-2)
    with pytest.raises(DivergenceError):
        integrate_ito(blow, p, [50.0], g)
    out = integrate_ito(blow, p, np.array([[50.0], [0.1]]), g, on_divergence="mask")
    assert np.isnan(out.states[-1, 0, 0]) and np.isfinite(out.states[-1, 1, 0])


def test_doleans_dade_strong_order(jump_triplet):
    sys_ = linear_system([[0.0]], [[[1.0]]])
    steps = [1e-2, 1e-3, 1e-4]
    errs = []
    for seed in range(6):
        p = sample_path(jump_triplet, (0.0, 1.0), 1e-4, seed)
        row = []
        for h in steps:
            g = make_grid(p, 0.0, 1.0, h)
            row.append(np.max(np.abs(integrate_ito(sys_, p, [1.0], g).states[:, 0] - stochastic_exponential(g))))
        errs.append(row)
    assert rate_fit(steps, np.median(errs, axis=0)) >= 0.4


def test_system_self_test():
    sys_ = scalar_system(lambda x: -(x**3), lambda x: -3 * x**2, lambda x: np.sin(x), lambda x: np.cos(x))
    assert sys_.self_test(np.linspace(-1, 1, 7)[:, None]) < 1e-6


def test_flow_result_csv(jump_path):
    g = make_grid(jump_path, 0.0, 0.1, 1e-2)
    text = integrate_ito(linear_system([[0.0]], [[[1.0]]]), jump_path, [1.0], g).to_csv()
    assert text.splitlines()[0].startswith("t,")
    assert len(text.splitlines()) == len(g) + 1


def test_jump_map_determinant_spot_check():
    from levy_rds.flows import jump_map_min_det

    lin = linear_system([[0.0]], [[[1.0]]])
    pts = np.linspace(-2, 2, 5)[:, None]
    assert jump_map_min_det(lin, pts, [[0.4], [-0.4]]) == pytest.approx(0.6)
    # a jump of -1 collapses x -> x (1 + u) to zero
    assert jump_map_min_det(lin, pts, [[-1.0]]) == pytest.approx(0.0, abs=1e-15)
