import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_cloud
from shapelab.asymptotics import (ShapeEstimate, bounded_series, effective_hamiltonian, estimate_gradient,
                                  estimate_shape, finite_difference_gradient, fit_domain, homogenization_curve,
                                  midpoint_convexity_violations, panel_alpha_beta, path_gradient_integrand,
                                  path_second_order, second_order_audit, shape_survey)
from shapelab.environment import ConstantField, EnvironmentSpec
from shapelab.kinetics import KineticEnergy
from shapelab.solver import GridPath, GridSpec

QUAD = KineticEnergy.quadratic()
QUARTIC = KineticEnergy.polynomial([0.0, 0.0, 0.5, 0.0, 0.25])
EMPTY = EnvironmentSpec(intensity=0.0)
SMALL = EnvironmentSpec(intensity=0.5)
GRID = GridSpec(dt=0.5, dx=0.125, steps=1, window=8)


def synthetic(v, lam, se=0.01, grad=None):
    n = 4
    series = np.full((n, 1), lam) + se * math.sqrt(n) * np.array([[-1.5], [-0.5], [0.5], [1.5]]) / math.sqrt(
        np.var([-1.5, -0.5, 0.5, 1.5], ddof=1))
    g = None if grad is None else np.full((n, 1, 1), grad)
    return ShapeEstimate((v,), [1.0], list(range(n)), series, g)


def test_zero_field_recovers_kinetic_energy():
    ests = shape_survey(EMPTY, QUARTIC, GRID, [(v,) for v in (-0.5, 0.0, 0.25, 1.0)], [5.0, 10.0], [0, 1],
                        with_gradient=True)
    for e in ests:
        v = e.v[0]
        assert e.lambda_hat == pytest.approx(0.5 * v ** 2 + 0.25 * v ** 4, abs=1e-12)
        assert e.stderr == 0.0
        assert e.grad_hat[0] == pytest.approx(v + v ** 3, abs=1e-12)
        assert e.snap_error == 0.0


def test_constant_field_adds_constant():
    est = estimate_shape(ConstantField(-0.3), QUAD, GRID, (0.5,), [4.0], [0, 1])
    assert est.lambda_hat == pytest.approx(0.125 - 0.3, abs=1e-12)


def test_estimate_is_stable_in_T_on_zero_field():
    est = estimate_shape(EMPTY, QUAD, GRID, (0.75,), [2.0, 4.0, 8.0], [0, 1])
    table = est.convergence_table()
    assert [row[1] for row in table] == pytest.approx([0.28125] * 3, abs=1e-12)
    assert est.richardson() == pytest.approx(0.28125, abs=1e-12)


def test_single_seed_flags_stderr():
    est = estimate_shape(SMALL, QUAD, GRID, (0.0,), [4.0], [3])
    assert math.isnan(est.stderr)
    assert est.flags


def test_bad_checkpoint_rejected():
    with pytest.raises(ValueError):
        estimate_shape(EMPTY, QUAD, GRID, (0.0,), [1.3], [0])


def test_parallel_matches_serial():
    a = shape_survey(SMALL, QUAD, GRID, [(0.5,)], [5.0], [0, 1, 2])
    b = shape_survey(SMALL, QUAD, GRID, [(0.5,)], [5.0], [0, 1, 2], workers=2)
    assert np.array_equal(a[0].lambda_series, b[0].lambda_series)


def test_gradient_estimators_agree_on_zero_field():
    ests = {v: estimate_shape(EMPTY, QUAD, GRID, (v,), [4.0], [0, 1], with_gradient=True)
            for v in (0.25, 0.5, 0.75)}
    fd, fd_se = finite_difference_gradient(ests, 0.5, 0.25)
    assert fd == pytest.approx(0.5, abs=1e-12) and fd_se == 0.0
    mean, se = estimate_gradient(EMPTY, QUAD, GRID, (0.5,), 4.0, [0, 1])
    assert mean[0] == pytest.approx(0.5, abs=1e-12)


def test_gradient_integrand_includes_theta():
    cloud = make_cloud([(0.5, 0.0, 1.0, 1.0, 1.0)])
    path = GridPath([0, 0], dt=1.0, dx=0.125)
    # midpoint (0.5, 0) sits on the bump center: Theta = 0 there, grad L(0) = 0
    assert path_gradient_integrand(cloud, QUAD, path)[0] == pytest.approx(0.0, abs=1e-15)
    path = GridPath([0, 4], dt=1.0, dx=0.125)
    tm, xm = path.midpoints()
    theta = cloud.evaluate(tm, xm, want=("theta",))["theta"][0, 0]
    assert path_gradient_integrand(cloud, QUAD, path)[0] == pytest.approx(0.5 + theta)


def test_fit_domain_covers_targets():
    grid = GridSpec(dt=0.5, dx=0.125, steps=40, window=16)
    fitted = fit_domain(grid, np.array([[10.0], [-2.0]]), margin=5.0)
    lo, shape = fitted.domain()
    assert lo[0] * 0.125 <= -7.0 and (lo[0] + shape[0] - 1) * 0.125 >= 15.0


def test_panel_zero_field_is_linear_in_alpha():
    grid = GridSpec(dt=0.5, dx=0.125, steps=8, window=8)
    panel = panel_alpha_beta(EMPTY, QUAD, grid, 0.5, [0.5, 1.0, 1.5], [0.5, 1.0], seeds=[0])
    assert np.allclose(panel.B[0], np.outer([0.5, 1.0, 1.5], [1, 1]) * grid.T * 0.125)
    assert not panel.concavity_violations()
    assert not panel.envelope_violations()
    assert np.allclose(panel.Lbar, 0.125) and np.allclose(panel.Fbar, 0.0)


def test_panel_detects_injected_convexity():
    grid = GridSpec(dt=0.5, dx=0.125, steps=4, window=8)
    panel = panel_alpha_beta(SMALL, QUAD, grid, 0.0, [0.5, 1.0, 1.5], [1.0], seeds=[0, 1])
    panel.B[:, 1, 0] = 0.5 * (panel.B[:, 0, 0] + panel.B[:, 2, 0]) - 1.0
    assert len(panel.concavity_violations()) == 2


def test_panel_rejects_nonpositive_parameters():
    with pytest.raises(ValueError):
        panel_alpha_beta(EMPTY, QUAD, GRID.with_(steps=2), 0.0, [0.0, 1.0], [1.0], [0])


def test_homogenization_zero_field():
    curve = homogenization_curve(EMPTY, QUAD, GRID, 1.0, 0.5, [1, 0.5, 0.25], seeds=[0, 1])
    assert curve.reference == pytest.approx(0.125)
    assert np.allclose(curve.mean_gap, 0.0) and np.allclose(curve.bias, 0.0)


def test_effective_hamiltonian_of_quadratic():
    ests = [synthetic(v, 0.5 * v * v, grad=v) for v in np.arange(-2, 2.01, 0.25)]
    out = effective_hamiltonian(ests, [-1.0, 0.0, 1.0])
    assert out["H"] == pytest.approx([0.5, 0.0, 0.5])
    assert out["midpoint_convex"]
    assert out["monotonicity"] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        effective_hamiltonian(ests[:2], [0.0])


def test_midpoint_convexity_flags_bump():
    ests = [synthetic(v, abs(v), se=0.001) for v in (-0.5, 0.0, 0.5)]
    assert not midpoint_convexity_violations(ests)
    ests[1] = synthetic(0.0, 1.0, se=0.001)
    assert len(midpoint_convexity_violations(ests)) == 1


@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.floats(0.0, 2.0))
def test_convex_profiles_never_flagged(coeffs, curvature):
    vs = np.arange(-1, 1.01, 0.25)
    ests = [synthetic(v, coeffs[0] + coeffs[1] * v + curvature * v * v + abs(coeffs[2]) * abs(v))
            for v in vs]
    assert not midpoint_convexity_violations(ests)


def test_second_order_zero_field():
    out = second_order_audit(EMPTY, QUAD, GRID, 0.5, [5.0, 10.0])
    assert out["M"] == [1.0, 1.0] and out["N"] == [0.0, 0.0]


def test_path_second_order_single_bump():
    cloud = make_cloud([(0.0, 0.0, 2.0, 1.0, 0.5)])
    path = GridPath([0, 0], dt=0.5, dx=0.125)
    M, N = path_second_order(cloud, QUARTIC, path, 0.5)
    assert M == pytest.approx(1.0 + 3.0 * 0.25)
    # midpoint at t = 0.25: lag^2 |a| g(0.25) 6 / r_x^2
    assert N == pytest.approx(0.25 ** 2 * 2.0 * (1 - 0.0625) ** 2 * 6.0 / 0.25)


@pytest.mark.parametrize("series,ok", [([1.0, 1.5, 1.9], True), ([1.0, 3.0], False),
                                       ([0.0, 0.0], True), ([0.0, 1.0], False)])
def test_bounded_series(series, ok):
    assert bounded_series(series) is ok
