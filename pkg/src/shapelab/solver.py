"""Exact dynamic programming for grid-discretized minimal actions.

Paths live on the space-time grid ``t_k = k dt``, ``x = n dx`` (``n`` an
integer vector) and move at most ``window`` nodes per axis per step.  One
step from node ``y`` at slice ``k`` to node ``x`` at slice ``k + 1`` costs

    dt * alpha * L((x - y) dx / dt + v) + dt * beta * F_v(t_k + dt/2, (x + y) dx / 2),

i.e. midpoint quadrature of the potential.  With ``v = 0`` and
``alpha = beta = 1`` this is the plain point-to-point action; with a shear
``v`` and a loop back to the origin it is the sheared loop action.

In a frame with shear ``v`` the window of allowed displacements is centred
at ``-round(v dt / dx)`` so that it always bounds the *physical* velocity
``u + v``; grid paths then correspond one-to-one under the shear.
"""
from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .environment import Box, ValidationError
from .kinetics import KineticEnergy, eval_L

INF = np.inf


class BoundaryHitError(RuntimeError):
    """A minimizer used an extreme displacement or touched the domain edge."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class SnapError(ValueError):
    """A target does not sit on a grid node."""


class UnreachableError(ValueError):
    """The requested target has infinite optimal action."""


@dataclass(frozen=True)
class Frame:
    """Shear ``v`` and the weights (alpha, beta) of kinetic and potential terms."""

    v: tuple = (0.0,)
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "v", tuple(float(c) for c in np.atleast_1d(self.v)))

    def vector(self, d: int) -> np.ndarray:
        v = np.asarray(self.v, dtype=float)
        if v.size == 1 and d > 1:
            v = np.full(d, v[0])
        return v.reshape(d)


@dataclass(frozen=True)
class GridSpec:
    """Space-time grid.

    ``half_extent`` (nodes per axis, or ``None`` for the full reachable cone)
    and ``center`` (node offset per axis) fix the spatial domain
    ``center +- half_extent``.
    """

    dt: float
    dx: float
    steps: int
    window: int
    d: int = 1
    half_extent: int | tuple | None = None
    center: int | tuple = 0

    def validate(self) -> "GridSpec":
        if not self.dt > 0:
            raise ValidationError("grid.dt", "must be > 0")
        if not self.dx > 0:
            raise ValidationError("grid.dx", "must be > 0")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValidationError("grid.steps", "must be a positive integer")
        if int(self.window) != self.window or self.window < 1:
            raise ValidationError("grid.window", "must be a positive integer")
        if self.d < 1:
            raise ValidationError("grid.d", "must be >= 1")
        if self.half_extent is not None and np.any(np.asarray(self.half_extent) < 0):
            raise ValidationError("grid.half_extent", "must be >= 0")
        return self

    @property
    def T(self) -> float:
        return self.steps * self.dt

    @property
    def velocity_step(self) -> float:
        """Spacing of the grid velocity lattice, dx / dt."""
        return self.dx / self.dt

    @property
    def max_speed(self) -> float:
        return self.window * self.dx / self.dt

    def shift_nodes(self, v) -> np.ndarray:
        """Nearest integer of v dt / dx per axis."""
        return np.rint(np.asarray(v, dtype=float) * self.dt / self.dx).astype(np.int64).reshape(-1)

    def commensurate(self, v, tol: float = 1e-9) -> bool:
        m = np.asarray(v, dtype=float) * self.dt / self.dx
        return bool(np.all(np.abs(m - np.rint(m)) <= tol))

    def domain(self, shift=None) -> tuple[np.ndarray, np.ndarray]:
        """(lowest node, shape) of the spatial domain."""
        if self.half_extent is None:
            m = np.zeros(self.d, dtype=np.int64) if shift is None else np.abs(shift)
            half = self.steps * (self.window + m)
        else:
            half = np.broadcast_to(np.asarray(self.half_extent, dtype=np.int64), (self.d,))
        center = np.broadcast_to(np.asarray(self.center, dtype=np.int64), (self.d,))
        return center - half, 2 * half + 1

    def with_(self, **changes) -> "GridSpec":
        data = asdict(self)
        data.update(changes)
        return GridSpec(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("half_extent", "center"):
            if isinstance(out[key], tuple):
                out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "GridSpec":
        data = dict(data)
        for key in ("half_extent", "center"):
            if isinstance(data.get(key), list):
                data[key] = tuple(data[key])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError("grid." + sorted(unknown)[0], "unknown field")
        return cls(**data).validate()


def grid_window(grid: GridSpec, frame: Frame | None = None, r_t_max: float = 1.0,
                start_step: int = 0, steps: int | None = None) -> Box:
    """Unpadded sampling window covering every potential query of a solve."""
    lo, shape = grid.domain(grid.shift_nodes(frame.vector(grid.d)) if frame else None)
    v = np.zeros(grid.d) if frame is None else np.abs(frame.vector(grid.d))
    steps = grid.steps if steps is None else steps
    x_lo = lo * grid.dx - r_t_max * v
    x_hi = (lo + shape - 1) * grid.dx + r_t_max * v
    return Box(start_step * grid.dt, (start_step + steps) * grid.dt, tuple(x_lo), tuple(x_hi))


def _displacements(d: int, window: int, center) -> np.ndarray:
    """Displacements in decreasing lexicographic order.

    Scanning them in this order and keeping only strict improvements selects
    the lexicographically smallest predecessor among ties.
    """
    axes = [range(c + window, c - window - 1, -1) for c in center]
    return np.array(list(itertools.product(*axes)), dtype=np.int64).reshape(-1, d)


def _half_coords(half_index, dx: float):
    return half_index * (dx / 2.0)


def _mid_time(step, dt: float):
    return (2 * step + 1) * (dt / 2.0)


@dataclass
class GridPath:
    """Grid polyline: absolute node indices at slices ``start_step .. start_step + K``."""

    nodes: np.ndarray
    dt: float
    dx: float
    start_step: int = 0

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.int64)
        if self.nodes.ndim == 1:
            self.nodes = self.nodes[:, None]

    @property
    def steps(self) -> int:
        return len(self.nodes) - 1

    @property
    def d(self) -> int:
        return self.nodes.shape[1]

    @property
    def times(self) -> np.ndarray:
        return (self.start_step + np.arange(len(self.nodes))) * self.dt

    @property
    def positions(self) -> np.ndarray:
        return self.nodes * self.dx

    @property
    def velocities(self) -> np.ndarray:
        return (np.diff(self.nodes, axis=0) * self.dx) / self.dt

    @property
    def endpoints(self) -> tuple:
        return tuple(self.nodes[0]), tuple(self.nodes[-1])

    def midpoints(self) -> tuple[np.ndarray, np.ndarray]:
        steps = self.start_step + np.arange(self.steps)
        half = self.nodes[:-1] + self.nodes[1:]
        return _mid_time(steps, self.dt), _half_coords(half, self.dx)


@dataclass
class ActionStack:
    """Optimal-action values at every slice plus predecessor choices."""

    values: np.ndarray          # (K+1, *shape)
    choice: np.ndarray          # (K, *shape), index into displacements; -1 if unreachable
    displacements: np.ndarray   # (ncodes, d)
    lo: np.ndarray              # lowest node per axis
    grid: GridSpec
    frame: Frame
    start_step: int
    start_node: np.ndarray
    env_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple:
        return self.values.shape[1:]

    @property
    def steps(self) -> int:
        return self.values.shape[0] - 1

    def index_of(self, node) -> tuple:
        idx = np.asarray(node, dtype=np.int64).reshape(-1) - self.lo
        if np.any(idx < 0) or np.any(idx >= np.asarray(self.shape)):
            raise ValueError(f"node {np.asarray(node).tolist()} outside the grid domain")
        return tuple(int(i) for i in idx)

    def value(self, node, step: int | None = None) -> float:
        step = self.steps if step is None else step
        return float(self.values[(step,) + self.index_of(node)])

    def node_of(self, x, tol: float = 1e-9) -> np.ndarray:
        ratio = np.atleast_1d(np.asarray(x, dtype=float)) / self.grid.dx
        node = np.rint(ratio)
        if np.any(np.abs(ratio - node) > tol):
            raise SnapError(f"target {np.asarray(x).tolist()} is not on the dx={self.grid.dx} grid")
        return node.astype(np.int64)

    def coordinates(self) -> np.ndarray:
        axes = [(self.lo[j] + np.arange(n)) * self.grid.dx for j, n in enumerate(self.shape)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def to_csv(self, path, step: int | None = None) -> None:
        step = self.steps if step is None else step
        coords = self.coordinates()
        vals = self.values[step].ravel()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{j + 1}" for j in range(coords.shape[1])] + ["value"])
            for c, val in zip(coords, vals):
                w.writerow([repr(float(a)) for a in c] + [repr(float(val))])

    def save(self, path, code_version: str = "") -> None:
        manifest = {"format_version": 1, "grid": self.grid.to_dict(),
                    "frame": asdict(self.frame), "env_hash": self.env_id,
                    "start_step": int(self.start_step), "start_node": self.start_node.tolist(),
                    "lo": self.lo.tolist(), "code_version": code_version}
        np.savez_compressed(path, values=self.values, choice=self.choice,
                            displacements=self.displacements,
                            manifest=np.array(json.dumps(manifest)))


def solve(env, L: KineticEnergy, grid: GridSpec, frame: Frame = Frame(),
          start_step: int = 0, start_node=None) -> ActionStack:
    """Bellman recursion over ``grid.steps`` slices starting at ``start_node``."""
    grid.validate()
    L.validate()
    d = grid.d
    v = frame.vector(d)
    if frame.alpha <= 0 or frame.beta < 0:
        raise ValidationError("frame", "need alpha > 0 and beta >= 0")
    center = -grid.shift_nodes(v)
    lo, shape = grid.domain(center)
    shape = tuple(int(n) for n in shape)
    start = np.zeros(d, dtype=np.int64) if start_node is None else \
        np.asarray(start_node, dtype=np.int64).reshape(d)
    disp = _displacements(d, int(grid.window), center)
    vel = (disp * grid.dx) / grid.dt
    kin = grid.dt * frame.alpha * eval_L(L, vel + v)

    K = int(grid.steps)
    values = np.full((K + 1,) + shape, INF)
    choice = np.full((K,) + shape, -1, dtype=np.int16 if len(disp) < 2**15 else np.int32)
    sidx = tuple(int(i) for i in start - lo)
    if any(i < 0 or i >= n for i, n in zip(sidx, shape)):
        raise ValueError("start node outside the grid domain")
    values[(0,) + sidx] = 0.0

    half_shape = tuple(2 * n - 1 for n in shape)
    n_arr = np.asarray(shape)
    # target slices per displacement
    plans = []
    for c, delta in enumerate(disp):
        a = np.maximum(0, delta)
        b = np.minimum(n_arr, n_arr + delta)
        if np.any(b <= a):
            continue
        tgt = tuple(slice(int(a[j]), int(b[j])) for j in range(d))
        src = tuple(slice(int(a[j] - delta[j]), int(b[j] - delta[j])) for j in range(d))
        half = tuple(slice(int(2 * a[j] - delta[j]), int(2 * (b[j] - 1) - delta[j] + 1), 2)
                     for j in range(d))
        plans.append((c, tgt, src, half))

    mask_buf = {}
    for k in range(K):
        step = start_step + k
        H = env.lattice_F(_mid_time(step, grid.dt), 2 * lo, half_shape, grid.dx / 2.0, v)
        pot = grid.dt * frame.beta * H
        prev = values[k]
        cur = values[k + 1]
        arg = choice[k]
        for c, tgt, src, half in plans:
            cand = prev[src] + (kin[c] + pot[half])
            view = cur[tgt]
            mask = mask_buf.setdefault(view.shape, np.empty(view.shape, dtype=bool))
            np.less(cand, view, out=mask)
            np.copyto(view, cand, where=mask)
            np.copyto(arg[tgt], c, where=mask)

    env_id = env.digest() if hasattr(env, "digest") else ""
    return ActionStack(values, choice, disp, lo, grid, frame, int(start_step), start, env_id,
                       meta={"center": center.tolist(), "window": int(grid.window)})


def point_to_point_action(stack: ActionStack, target_x, step: int | None = None) -> float:
    """Optimal action to the spatial point ``target_x`` (must be a grid node).

    Returns ``inf`` when the target is not reachable.
    """
    node = stack.node_of(target_x)
    return stack.value(node, step)


def extract_minimizer(stack: ActionStack, target_node, step: int | None = None,
                      check_boundary: bool = True) -> GridPath:
    """Backtrack predecessors from ``target_node`` at slice ``step`` to slice 0.

    Raises :class:`BoundaryHitError` if the path uses an extreme displacement
    of the velocity window or visits the edge of a truncated domain.
    """
    step = stack.steps if step is None else step
    node = np.asarray(target_node, dtype=np.int64).reshape(-1)
    if not np.isfinite(stack.value(node, step)):
        raise UnreachableError(f"node {node.tolist()} unreachable at slice {step}")
    nodes = [node]
    center = np.asarray(stack.meta["center"])
    W = stack.meta["window"]
    edge_hi = stack.lo + np.asarray(stack.shape) - 1
    for k in range(step, 0, -1):
        c = int(stack.choice[(k - 1,) + stack.index_of(node)])
        delta = stack.displacements[c]
        if check_boundary and np.any(np.abs(delta - center) == W):
            raise BoundaryHitError(
                f"minimizer uses an extreme displacement at slice {stack.start_step + k}; "
                f"increase the velocity window (W={W})", step=stack.start_step + k)
        node = node - delta
        if check_boundary and (np.any(node == stack.lo) or np.any(node == edge_hi)) \
                and stack.grid.half_extent is not None:
            raise BoundaryHitError(
                f"minimizer touches the domain edge at slice {stack.start_step + k - 1}; "
                "enlarge half_extent", step=stack.start_step + k - 1)
        nodes.append(node)
    return GridPath(np.array(nodes[::-1]), stack.grid.dt, stack.grid.dx, stack.start_step)


def path_step_costs(env, L: KineticEnergy, grid: GridSpec, frame: Frame,
                    path: GridPath) -> tuple[np.ndarray, np.ndarray]:
    """Per-step kinetic and potential costs along ``path`` (same quadrature as :func:`solve`)."""
    v = frame.vector(grid.d)
    steps = path.start_step + np.arange(path.steps)
    vel = (np.diff(path.nodes, axis=0) * grid.dx) / grid.dt
    kin = grid.dt * frame.alpha * eval_L(L, vel + v)
    half = path.nodes[:-1] + path.nodes[1:]
    F = env.evaluate(_mid_time(steps, grid.dt), _half_coords(half, grid.dx), v=v, want=("F",))["F"]
    pot = grid.dt * frame.beta * F
    return kin, pot


def action_of_path(env, L: KineticEnergy, grid: GridSpec, frame: Frame, path: GridPath) -> float:
    """Discrete action of a grid path; bit-identical to the solver's accumulation."""
    kin, pot = path_step_costs(env, L, grid, frame, path)
    total = 0.0
    for cost in kin + pot:
        total = total + float(cost)
    return total


def loop_action(env, L, grid, frame, steps: int | None = None) -> tuple[float, ActionStack]:
    """Sheared loop action: value at the origin after ``steps`` slices."""
    stack = solve(env, L, grid, frame)
    step = stack.steps if steps is None else steps
    return stack.value(np.zeros(grid.d, dtype=np.int64), step), stack
