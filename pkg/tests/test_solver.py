import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_cloud
from shapelab.environment import (Box, ConstantField, EnvironmentSpec, PoissonCloud, ValidationError,
                                  sample_environment)
from shapelab.kinetics import KineticEnergy
from shapelab.solver import (BoundaryHitError, Frame, GridPath, GridSpec, SnapError, UnreachableError,
                             action_of_path, extract_minimizer, grid_window, loop_action,
                             path_step_costs, point_to_point_action, solve)

QUAD = KineticEnergy.quadratic()
QUARTIC = KineticEnergy.polynomial([0.0, 0.0, 0.5, 0.0, 0.25])


def all_paths(grid, lo, hi):
    W = grid.window
    for steps in itertools.product(range(-W, W + 1), repeat=grid.steps):
        nodes = np.concatenate([[0], np.cumsum(steps)])
        if nodes.min() >= lo and nodes.max() <= hi:
            yield nodes


def test_zero_field_value_is_kinetic():
    grid = GridSpec(dt=0.5, dx=0.25, steps=8, window=4)
    stack = solve(ConstantField(0.0), QUAD, grid)
    du = grid.dx / grid.dt
    for node in range(-16, 17):
        # r steps of (q + 1) nodes and K - r steps of q nodes
        q, r = divmod(node, grid.steps)
        exact = grid.dt * (r * 0.5 * ((q + 1) * du) ** 2 + (grid.steps - r) * 0.5 * (q * du) ** 2)
        assert stack.value([node]) == pytest.approx(exact, abs=1e-12)


def test_constant_field_shifts_by_c_T():
    grid = GridSpec(dt=0.5, dx=0.25, steps=6, window=3)
    base = solve(ConstantField(0.0), QUARTIC, grid).values[-1]
    shifted = solve(ConstantField(0.7), QUARTIC, grid).values[-1]
    finite = np.isfinite(base)
    assert np.allclose(shifted[finite] - base[finite], 0.7 * grid.T, atol=1e-12)


def test_unreachable_cells_are_infinite():
    grid = GridSpec(dt=1.0, dx=1.0, steps=2, window=1, half_extent=4)
    stack = solve(ConstantField(0.0), QUAD, grid)
    assert math.isinf(stack.value([3]))
    with pytest.raises(UnreachableError):
        extract_minimizer(stack, [3])


def test_minimizer_reproduces_value():
    cloud = sample_environment(EnvironmentSpec(seed=4), Box(0.0, 5.0, (-25.0,), (25.0,)))
    grid = GridSpec(dt=0.25, dx=0.125, steps=20, window=8)
    frame = Frame(alpha=1.25, beta=0.75)
    stack = solve(cloud, QUAD, grid, frame)
    for target in (-12, 0, 7, 30):
        path = extract_minimizer(stack, [target])
        assert path.endpoints == ((0,), (target,))
        assert action_of_path(cloud, QUAD, grid, frame, path) == stack.value([target])
        kin, pot = path_step_costs(cloud, QUAD, grid, frame, path)
        assert kin.shape == pot.shape == (grid.steps,)


def test_ties_pick_lexicographically_smallest_predecessor():
    # symmetric zero field: targets at odd offset have two equal-cost splits
    grid = GridSpec(dt=1.0, dx=1.0, steps=2, window=2, half_extent=4)
    stack = solve(ConstantField(0.0), QUAD, grid)
    path = extract_minimizer(stack, [1], check_boundary=False)
    assert path.nodes[:, 0].tolist() == [0, 0, 1]


def test_sheared_loop_action_zero_field():
    grid = GridSpec(dt=0.5, dx=0.125, steps=10, window=6)
    value, _ = loop_action(ConstantField(0.0), QUAD, grid, Frame(v=(0.5,)))
    assert value == pytest.approx(grid.T * 0.125, abs=1e-12)


def test_boundary_hit_on_narrow_window():
    grid = GridSpec(dt=0.5, dx=0.125, steps=4, window=2)
    stack = solve(ConstantField(0.0), QUAD, grid)
    with pytest.raises(BoundaryHitError):
        extract_minimizer(stack, [8])
    extract_minimizer(stack, [4])


def test_boundary_hit_on_truncated_domain():
    # a deep well just past the edge pulls the minimizer onto it
    well = make_cloud([(1.0, 0.7, -5.0, 1.0, 0.3)])
    grid = GridSpec(dt=0.5, dx=0.125, steps=4, window=3, half_extent=5)
    stack = solve(well, QUAD, grid)
    with pytest.raises(BoundaryHitError):
        extract_minimizer(stack, [0])
    extract_minimizer(stack, [0], check_boundary=False)


def test_snap_error():
    stack = solve(ConstantField(0.0), QUAD, GridSpec(dt=0.5, dx=0.125, steps=2, window=2))
    with pytest.raises(SnapError):
        point_to_point_action(stack, [0.1])
    assert point_to_point_action(stack, [0.25]) == stack.value([2])


def test_grid_validation_and_roundtrip():
    with pytest.raises(ValidationError):
        GridSpec(dt=0.0, dx=1.0, steps=1, window=1).validate()
    with pytest.raises(ValidationError):
        GridSpec.from_dict({"dt": 1, "dx": 1, "steps": 1, "window": 1, "oops": 2})
    g = GridSpec(dt=0.5, dx=0.125, steps=3, window=2, d=2, half_extent=(3, 4), center=(1, 0))
    assert GridSpec.from_dict(json.loads(json.dumps(g.to_dict()))) == g
    assert g.commensurate([0.25]) and not g.commensurate([0.1])


def test_grid_window_covers_queries():
    grid = GridSpec(dt=0.5, dx=0.125, steps=6, window=4)
    box = grid_window(grid, Frame(v=(0.5,)))
    cloud = sample_environment(EnvironmentSpec(seed=1), box)
    solve(cloud, QUAD, grid, Frame(v=(0.5,)))


def test_two_dimensional_matches_enumeration():
    pts = [(0.6, 0.2, -0.3, 1.5, 0.5, 0.5), (1.1, -0.3, 0.1, 1.0, 0.6, 0.8)]
    pts = np.asarray(pts)
    cloud = PoissonCloud(pts[:, 0], pts[:, 1:3], pts[:, 3], pts[:, 4], pts[:, 5],
                         Box(-5.0, 5.0, (-5.0, -5.0), (5.0, 5.0)), EnvironmentSpec(d=2))
    grid = GridSpec(dt=0.5, dx=0.25, steps=3, window=1, d=2, half_extent=2)
    stack = solve(cloud, QUAD, grid)
    moves = list(itertools.product(range(-1, 2), repeat=2))
    best = {}
    for seq in itertools.product(moves, repeat=3):
        nodes = np.vstack([[0, 0], np.cumsum(seq, axis=0)])
        if np.abs(nodes).max() > 2:
            continue
        path = GridPath(nodes, grid.dt, grid.dx)
        key = tuple(nodes[-1])
        best[key] = min(best.get(key, math.inf), action_of_path(cloud, QUAD, grid, Frame(), path))
    for key, val in best.items():
        assert stack.value(list(key)) == val


def test_save_roundtrip(tmp_path):
    grid = GridSpec(dt=0.5, dx=0.25, steps=3, window=2)
    stack = solve(ConstantField(0.0), QUAD, grid)
    stack.save(tmp_path / "stack.npz", code_version="x")
    stack.to_csv(tmp_path / "final.csv")
    data = np.load(tmp_path / "stack.npz")
    assert np.array_equal(data["values"], stack.values)
    assert json.loads(str(data["manifest"]))["grid"]["steps"] == 3
    lines = (tmp_path / "final.csv").read_text().splitlines()
    assert lines[0] == "x1,value" and len(lines) == 1 + stack.shape[0]


@settings(max_examples=25)
@given(seed=st.integers(0, 10_000), amp=st.floats(0.0, 3.0), tb=st.floats(0.0, 1.5), xb=st.floats(-1, 1))
def test_adding_nonnegative_bump_never_lowers_values(seed, amp, tb, xb):
    rng = np.random.default_rng(seed)
    n = 4
    base = np.column_stack([rng.uniform(0, 1.5, n), rng.uniform(-1, 1, n), rng.uniform(-1, 1, n),
                            rng.uniform(0.3, 1, n), rng.uniform(0.3, 1, n)])
    extra = np.vstack([base, [tb, xb, amp, 0.8, 0.8]])
    grid = GridSpec(dt=0.5, dx=0.25, steps=3, window=2, half_extent=6)
    lo = solve(make_cloud(base), QUAD, grid).values[-1]
    hi = solve(make_cloud(extra), QUAD, grid).values[-1]
    finite = np.isfinite(lo)
    assert np.all(hi[finite] >= lo[finite] - 1e-12)


@settings(max_examples=15)
@given(seed=st.integers(0, 10_000))
def test_small_instances_match_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = 3
    pts = np.column_stack([rng.uniform(0, 1.5, n), rng.uniform(-0.75, 0.75, n), rng.uniform(-2, 2, n),
                           rng.uniform(0.3, 1, n), rng.uniform(0.3, 1, n)])
    cloud = make_cloud(pts)
    grid = GridSpec(dt=0.5, dx=0.25, steps=3, window=2, half_extent=3)
    stack = solve(cloud, QUAD, grid)
    best = {}
    for nodes in all_paths(grid, -3, 3):
        val = action_of_path(cloud, QUAD, grid, Frame(), GridPath(nodes, grid.dt, grid.dx))
        best[nodes[-1]] = min(best.get(nodes[-1], math.inf), val)
    for node, val in best.items():
        assert stack.value([node]) == val
