import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_cloud
from shapelab.environment import (AmplitudeDist, Box, ConstantField, DomainError, EnvironmentSpec,
                                  SPATIAL_HESSIAN_SUP, ValidationError, cloud_from_dict, cloud_to_dict,
                                  eval_F, eval_F_sheared, eval_gradF, eval_hessF, eval_Theta,
                                  linear_growth_audit, load_cloud, moment_audit, sample_environment,
                                  save_cloud, shear_cloud, spatial_profile, temporal_profile)

WINDOW = Box(0.0, 10.0, (-10.0,), (10.0,))


def naive_F(points, t, x, v=0.0):
    """Direct sum over hand-placed bumps, d = 1."""
    total = 0.0
    for ti, xi, a, rt, rx in points:
        tau = (t - ti) / rt
        q = abs(x - xi + (t - ti) * v) / rx
        if abs(tau) < 1 and q < 1:
            total += a * (1 - tau ** 2) ** 2 * (1 - q ** 2) ** 3
    return total


def test_profiles_values():
    assert spatial_profile(0.0) == 1.0
    assert temporal_profile(0.5) == pytest.approx(0.75 ** 2)
    assert spatial_profile(0.5) == pytest.approx(0.75 ** 3)
    assert spatial_profile(1.0) == 0.0 and temporal_profile(-1.0) == 0.0


def test_spatial_hessian_sup_numerically():
    q = np.linspace(0, 1, 20001)
    h2 = np.abs(np.gradient(np.gradient(spatial_profile(q), q), q))
    assert h2[5:-5].max() == pytest.approx(SPATIAL_HESSIAN_SUP, rel=1e-3)


def test_single_bump_matches_hand_formula():
    pts = [(1.0, 0.5, 2.0, 1.0, 1.0)]
    cloud = make_cloud(pts)
    for t, x in [(1.0, 0.5), (1.3, 0.2), (0.1, 1.4), (2.5, 0.0)]:
        assert eval_F(cloud, t, [x]) == pytest.approx(naive_F(pts, t, x), abs=1e-15)


def test_sheared_matches_hand_formula():
    pts = [(1.0, 0.5, 2.0, 0.8, 1.0), (1.5, -0.3, -1.0, 1.0, 0.6)]
    cloud = make_cloud(pts)
    for v in (-1.0, 0.3, 2.0):
        for t, x in [(1.2, 0.4), (0.9, -0.6), (1.6, 0.1)]:
            assert eval_F_sheared(cloud, [v], t, [x]) == pytest.approx(naive_F(pts, t, x, v), abs=1e-14)


def test_shear_cloud_identity(rng):
    cloud = sample_environment(EnvironmentSpec(seed=3), WINDOW)
    v = 0.75
    t = rng.uniform(1, 9, 200)
    x = rng.uniform(-2, 2, 200)
    direct = cloud.evaluate(t, x + t * v)["F"]
    pushed = shear_cloud(cloud, [-v]).evaluate(t, x, v=[v])["F"]
    assert np.allclose(direct, pushed, rtol=0, atol=1e-13)


def test_derivatives_against_finite_differences(rng):
    cloud = sample_environment(EnvironmentSpec(seed=5), WINDOW)
    t = rng.uniform(2, 8, 50)
    x = rng.uniform(-5, 5, 50)
    h = 1e-5
    fd = (eval_F(cloud, t, x + h) - eval_F(cloud, t, x - h)) / (2 * h)
    assert np.allclose(eval_gradF(cloud, t, x)[:, 0], fd, atol=1e-7)
    fd2 = (eval_gradF(cloud, t, x + h) - eval_gradF(cloud, t, x - h))[:, 0] / (2 * h)
    assert np.allclose(eval_hessF(cloud, t, x)[:, 0, 0], fd2, atol=1e-6)


def test_theta_is_velocity_derivative(rng):
    cloud = sample_environment(EnvironmentSpec(seed=6), WINDOW)
    t = rng.uniform(2, 8, 30)
    x = rng.uniform(-5, 5, 30)
    w = 1e-6
    fd = (eval_F_sheared(cloud, [w], t, x) - eval_F_sheared(cloud, [-w], t, x)) / (2 * w)
    assert np.allclose(eval_Theta(cloud, t, x)[:, 0], fd, atol=1e-6)


def test_indexed_matches_bruteforce(rng):
    cloud = sample_environment(EnvironmentSpec(seed=7, r_t=(0.3, 1.0), r_x=(0.2, 1.0)), WINDOW)
    t = rng.uniform(0, 10, 300)
    x = rng.uniform(-10, 10, 300)
    for v in (None, [0.5]):
        fast = cloud.evaluate(t, x, v=v, want=("F", "grad", "theta"), check=False)
        slow = cloud.evaluate_bruteforce(t, x, v=v, want=("F", "grad", "theta"))
        for key in fast:
            assert np.array_equal(fast[key], slow[key])


def test_lattice_matches_pointwise():
    cloud = sample_environment(EnvironmentSpec(seed=8), WINDOW)
    for v in (None, [0.25]):
        grid = cloud.lattice_F(4.3, [-40], 81, 0.125, v=v)
        pointwise = cloud.evaluate(np.full(81, 4.3), np.arange(-40, 41) * 0.125, v=v)["F"]
        assert np.array_equal(grid, pointwise)


def test_two_dimensional_lattice_matches_pointwise():
    spec = EnvironmentSpec(d=2, seed=2)
    cloud = sample_environment(spec, Box(0.0, 4.0, (-3.0, -3.0), (3.0, 3.0)))
    grid = cloud.lattice_F(2.0, [-8, -8], (17, 17), 0.25)
    ii, jj = np.meshgrid(np.arange(-8, 9), np.arange(-8, 9), indexing="ij")
    xs = np.column_stack([ii.ravel(), jj.ravel()]) * 0.25
    assert np.array_equal(grid.ravel(), cloud.evaluate(np.full(len(xs), 2.0), xs)["F"])


def test_sampling_is_deterministic_and_seed_dependent():
    a = sample_environment(EnvironmentSpec(seed=11), WINDOW)
    b = sample_environment(EnvironmentSpec(seed=11), WINDOW)
    c = sample_environment(EnvironmentSpec(seed=12), WINDOW)
    assert a == b and a.digest() == b.digest()
    assert a.digest() != c.digest()


def test_poisson_count_matches_intensity():
    spec = EnvironmentSpec(intensity=2.0)
    box = Box(0.0, 20.0, (-20.0,), (20.0,))
    counts = [len(sample_environment(spec.with_seed(s), box)) for s in range(30)]
    expected = 2.0 * 22.0 * 42.0
    assert abs(np.mean(counts) - expected) < 4 * math.sqrt(expected / 30)


def test_zero_intensity_is_empty():
    cloud = sample_environment(EnvironmentSpec(intensity=0.0), WINDOW)
    assert len(cloud) == 0
    assert eval_F(cloud, 1.0, [0.0]) == 0.0


def test_outside_window_raises():
    cloud = sample_environment(EnvironmentSpec(seed=1), WINDOW)
    with pytest.raises(DomainError):
        cloud.evaluate([5.0], [[9.5]], v=[1.0])
    with pytest.raises(DomainError):
        cloud.evaluate([11.5], [[0.0]])


@pytest.mark.parametrize("kwargs,field", [
    (dict(intensity=-1.0), "environment.intensity"),
    (dict(intensity=math.nan), "environment.intensity"),
    (dict(r_x=2.0), "environment.r_x"),
    (dict(r_t=0.0), "environment.r_t"),
    (dict(amplitude=AmplitudeDist("cauchy", (1.0,))), "environment.amplitude"),
    (dict(amplitude=AmplitudeDist.exponential(-1.0)), "environment.amplitude"),
])
def test_validation_names_field(kwargs, field):
    with pytest.raises(ValidationError) as err:
        EnvironmentSpec(**kwargs).validate()
    assert err.value.field == field


def test_spec_roundtrip():
    spec = EnvironmentSpec(d=2, intensity=0.5, amplitude=AmplitudeDist.exponential(2.0, -1.0),
                           r_t=(0.2, 0.9), seed=42)
    again = EnvironmentSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again == spec
    with pytest.raises(ValidationError):
        EnvironmentSpec.from_dict({"bogus": 1})


def test_cloud_roundtrip(tmp_path):
    cloud = shear_cloud(sample_environment(EnvironmentSpec(seed=9), WINDOW), [0.5])
    path = tmp_path / "cloud.json"
    save_cloud(cloud, path)
    again = load_cloud(path)
    assert again == cloud
    bad = cloud_to_dict(cloud)
    bad["format_version"] = 99
    with pytest.raises(ValidationError):
        cloud_from_dict(bad)


def test_constant_field():
    field = ConstantField(-0.5, d=2)
    out = field.evaluate([0.0, 1.0], [[0.0, 0.0], [3.0, 1.0]], want=("F", "grad"))
    assert np.array_equal(out["F"], [-0.5, -0.5])
    assert np.array_equal(out["grad"], np.zeros((2, 2)))


def test_audits_report():
    spec = EnvironmentSpec(seed=0)
    mom = moment_audit(spec, sample_sizes=(10, 20), density=5)
    assert set(mom) >= {"mgf", "stable_lambda"}
    growth = linear_growth_audit(spec, ranges=(2.0, 4.0))
    assert len(growth["max_ratio"]) == 2


@given(t=st.floats(0.5, 9.5), x=st.floats(-8, 8), v=st.floats(-2, 2))
def test_bounded_by_amplitude_sum(t, x, v):
    pts = [(2.0, 0.0, 1.0, 1.0, 1.0), (5.0, 1.0, -0.5, 1.0, 1.0), (5.5, 1.2, 0.7, 0.6, 0.9)]
    cloud = make_cloud(pts)
    value = eval_F_sheared(cloud, [v], t, [x])
    assert abs(value) <= 2.2 + 1e-12
    assert value == pytest.approx(naive_F(pts, t, x, v), abs=1e-14)


@given(a=st.floats(-3, 3), t=st.floats(0, 1), x=st.floats(-1, 1))
def test_linear_in_amplitude(a, t, x):
    one = eval_F(make_cloud([(0.5, 0.0, 1.0, 1.0, 1.0)]), t, [x])
    scaled = eval_F(make_cloud([(0.5, 0.0, a, 1.0, 1.0)]), t, [x])
    assert scaled == pytest.approx(a * one, abs=1e-14)


def test_empty_cloud_vector_outputs():
    cloud = make_cloud(np.zeros((0, 5)))
    out = cloud.evaluate([1.0, 2.0], [[0.0], [1.0]], want=("grad", "theta", "hess"))
    assert out["grad"].shape == (2, 1) and out["hess"].shape == (2, 1, 1)
    assert not out["theta"].any()
