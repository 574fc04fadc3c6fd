import io
import math

import numpy as np
import pytest

from levy_rds import LevyTriplet, ParameterError, RangeError, TwoPoint, UniformBall, make_grid, sample_path, shift
from levy_rds.levy_paths import (
    TruncatedGaussian,
    empirical_characteristic_check,
    jump_law_from_dict,
    path_to_csv,
    read_path_csv,
    refine,
    sample_increment,
    stationary_exp_integral,
)


def test_drift_only_value():
    tri = LevyTriplet(1, [1.0], [[0.0]])
    p = sample_path(tri, (-1.0, 3.0), 1e-2, 0)
    assert p.evaluate(2.0)[0] == pytest.approx(2.0, abs=1e-12)
    assert np.all(p.evaluate(0.0) == 0.0)


def test_forced_jump_positive_side_is_cadlag():
    tri = LevyTriplet(1, [0.0], [[0.0]], 1.0, UniformBall(1.0, 1))
    p = sample_path(tri, (-1.0, 1.0), 1e-2, 0, forced_jumps=[(0.5, [0.3])])
    assert p.evaluate(0.49)[0] == 0.0
    assert p.evaluate(0.5)[0] == pytest.approx(0.3)
    assert p.left_limit(0.5)[0] == 0.0
    assert p.evaluate(0.9)[0] == pytest.approx(0.3)


def test_forced_jump_negative_side_is_caglad():
    tri = LevyTriplet(1, [0.0], [[0.0]], 1.0, UniformBall(1.0, 1))
    p = sample_path(tri, (-1.0, 1.0), 1e-2, 0, forced_jumps=[(-0.5, [0.3])])
    at = p.evaluate(-0.5)[0]
    assert at == p.left_limit(-0.5)[0]
    assert p.right_limit(-0.5)[0] != pytest.approx(at)


def test_same_seed_identical_records(jump_triplet):
    a = sample_path(jump_triplet, (-2.0, 2.0), 1e-2, 5)
    b = sample_path(jump_triplet, (-2.0, 2.0), 1e-2, 5)
    assert np.array_equal(a.jump_times(), b.jump_times())
    assert np.array_equal(a.L, b.L)


def test_extending_horizon_keeps_shared_part(jump_triplet):
    a = sample_path(jump_triplet, (-2.0, 2.0), 1e-2, 5)
    b = sample_path(jump_triplet, (-4.0, 4.0), 1e-2, 5)
    ts = np.linspace(-2.0, 2.0, 41)
    assert np.allclose(a.evaluate(ts), b.evaluate(ts), atol=1e-12)


def test_out_of_horizon():
    p = sample_path(LevyTriplet(1, [1.0], [[0.0]]), (-1.0, 1.0), 1e-2, 0)
    with pytest.raises(RangeError):
        p.evaluate(2.0)
    with pytest.raises(ParameterError):
        sample_path(LevyTriplet(1, [1.0], [[0.0]]), (0.5, 1.0), 1e-2, 0)


def test_triplet_validation():
    with pytest.raises(ParameterError):
        LevyTriplet(1, [0.0], [[0.0]], 1.0, None)
    with pytest.raises(ParameterError):
        LevyTriplet(1, [0.0], [[0.0]], small_jump_cutoff=1.5)
    with pytest.raises(ParameterError):
        LevyTriplet(2, [0.0, 0.0], np.eye(2), 1.0, UniformBall(1.0, 1))


def test_shift_identity_and_group(jump_path):
    s, t = 0.7, 0.4
    v = shift(jump_path, s)
    for u in (-0.3, 0.0, 0.25, 1.1):
        assert np.allclose(v.evaluate(u), jump_path.evaluate(s + u) - jump_path.evaluate(s), atol=1e-12)
    vv = shift(v, t)
    w = shift(jump_path, s + t)
    for u in (-0.2, 0.3, 0.9):
        assert np.allclose(vv.evaluate(u), w.evaluate(u), atol=1e-12)
    assert np.allclose(shift(jump_path, 0.0).evaluate(0.5), jump_path.evaluate(0.5))


def test_stationary_integral_drift_only(drift_path):
    mu = 1.0
    val = stationary_exp_integral(drift_path, mu, 0.0, 20.0)[0]
    assert abs(val - 1.0 / mu) <= math.exp(-20.0) / mu + 1e-12


def test_stationary_integral_single_jump():
    tri = LevyTriplet(1, [0.0], [[0.0]], 1.0, UniformBall(1.0, 1))
    p = sample_path(tri, (-21.0, 2.0), 1e-2, 0, forced_jumps=[(0.5, [0.3])])
    assert stationary_exp_integral(p, 2.0, 1.0, 20.0)[0] == pytest.approx(math.exp(-2.0 * 0.5) * 0.3, abs=1e-14)


def test_characteristic_function_drift_and_gaussian():
    drift = LevyTriplet(1, [0.7], [[0.0]])
    assert empirical_characteristic_check(drift, 1.0, [[0.5], [1.3]], 2000, 0) < 1e-12
    n = 20000
    gauss = LevyTriplet(1, [0.0], [[0.8]])
    assert empirical_characteristic_check(gauss, 1.0, [[0.5], [1.0], [2.0]], n, 1) <= 4 / math.sqrt(n)


def test_two_point_exponent_compensated():
    law = TwoPoint([0.2], [0.9], 0.3)
    tri = LevyTriplet(1, [0.1], [[0.0]], 2.0, law, small_jump_cutoff=0.5, compensate_small=True)
    z = np.array([0.7])
    expect = 1j * 0.7 * 0.1 + 2.0 * (
        0.3 * (np.exp(1j * 0.7 * 0.2) - 1 - 1j * 0.7 * 0.2) + 0.7 * (np.exp(1j * 0.7 * 0.9) - 1)
    )
    assert tri.psi(z) == pytest.approx(expect, abs=1e-14)
    n = 40000
    assert empirical_characteristic_check(tri, 1.0, [[0.7], [1.5]], n, 3) <= 4 / math.sqrt(n)


def test_jump_law_dict_round_trip():
    for law in (UniformBall(0.4, 2), TwoPoint([0.1], [-0.2], 0.4), TruncatedGaussian([0.0], [0.5], [-1.0], [1.0])):
        again = jump_law_from_dict(law.to_dict())
        assert again == law
    with pytest.raises(ParameterError):
        jump_law_from_dict({"kind": "stable"})


def test_stationary_increments_statistic(jump_triplet):
    a = sample_increment(jump_triplet, 0.5, 4000, 1)[:, 0]
    p = sample_path(jump_triplet, (-1.0, 400.0), 1e-2, 2)
    t = np.arange(0.0, 399.5, 0.5)
    inc = np.diff(p.evaluate(np.append(t, 399.5))[:, 0])
    se = math.sqrt(a.var() / len(a) + inc.var() / len(inc))
    assert abs(a.mean() - inc.mean()) < 3 * se
    assert abs(a.var() - inc.var()) < 0.15 * a.var()


def test_refine_keeps_shared_nodes(jump_path):
    fine = refine(jump_path, 4)
    ts = jump_path.nodes[::50]
    assert np.allclose(fine.evaluate(ts), jump_path.evaluate(ts), atol=1e-12)
    assert len(fine.nodes) > len(jump_path.nodes)


def test_grid_contains_jumps(jump_path):
    g = make_grid(jump_path, 0.0, 1.0, 1e-2)
    jt = jump_path.jump_times()
    inside = jt[(jt > 0.0) & (jt < 1.0)]
    assert set(np.round(inside, 12)) <= set(np.round(g.nodes, 12))
    c = g.cells
    tot = c.dLc.sum(axis=0) + c.pre.sum(axis=0) + c.post.sum(axis=0)
    assert np.allclose(tot, jump_path.evaluate(1.0) - jump_path.evaluate(0.0), atol=1e-12)


def test_csv_round_trip(jump_path, tmp_path):
    text = path_to_csv(jump_path, tmp_path / "p.csv")
    assert text.splitlines()[0] == "t,L_1,is_jump"
    assert "\r" not in text
    table = read_path_csv(io.StringIO(text))
    assert np.array_equal(table.t, jump_path.nodes)
    assert np.array_equal(table.L, jump_path.L)
    assert table.is_jump.sum() == jump_path.is_jump.sum()
