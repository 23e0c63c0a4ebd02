"""Box discretizations of space-time paths and empirical bound audits."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .kinetics import KineticEnergy, legendre
from .solver import ActionStack, Frame, GridPath, GridSpec, action_of_path


@dataclass(frozen=True)
class Discretization:
    """Half-open unit boxes ``k + [0, 1)^(d+1)`` touched by ``t -> (t, path(t))``, ``t in [0, T)``."""

    boxes: frozenset

    @property
    def m(self) -> int:
        return len(self.boxes)

    def is_connected(self) -> bool:
        return is_connected(self.boxes)


def _floor_box(point) -> tuple:
    return tuple(math.floor(c) for c in point)


def _vertices(path: GridPath, scale: float) -> list[list[Fraction]]:
    # exact rationals: box membership on integer boundaries must not depend on rounding
    dt, dx, s = Fraction(path.dt), Fraction(path.dx), Fraction(scale)
    out = []
    for k, node in enumerate(path.nodes):
        t = (path.start_step + k) * dt / s
        out.append([t] + [int(n) * dx / s for n in node])
    return out


def discretize_path(path: GridPath, scale: float = 1.0) -> Discretization:
    """Exact segment walk over the polyline in units of ``scale``.

    On each segment ``P(s) = P0 + s (P1 - P0)``, ``s in [0, 1)``, the box
    index is constant between consecutive crossing parameters; the walk takes
    the box at every crossing and at every sub-interval midpoint.  The final
    vertex is excluded (time interval ``[0, T)``).
    """
    verts = _vertices(path, scale)
    boxes = set()
    for p0, p1 in zip(verts, verts[1:]):
        cuts = {Fraction(0), Fraction(1)}
        for a, b in zip(p0, p1):
            if a == b:
                continue
            lo, hi = (a, b) if a < b else (b, a)
            for n in range(math.ceil(lo), math.floor(hi) + 1):
                s = (n - a) / (b - a)
                if 0 < s < 1:
                    cuts.add(s)
        cuts = sorted(cuts)
        for s0, s1 in zip(cuts, cuts[1:]):
            for s in (s0, (s0 + s1) / 2):
                boxes.add(_floor_box([a + s * (b - a) for a, b in zip(p0, p1)]))
    return Discretization(frozenset(boxes))


def dense_sample_boxes(path: GridPath, scale: float = 1.0, per_step: int = 100) -> frozenset:
    """Boxes hit by sampling each segment at ``per_step`` equally spaced parameters in [0, 1)."""
    verts = _vertices(path, scale)
    boxes = set()
    for p0, p1 in zip(verts, verts[1:]):
        for j in range(per_step):
            s = Fraction(j, per_step)
            boxes.add(_floor_box([a + s * (b - a) for a, b in zip(p0, p1)]))
    return frozenset(boxes)


def is_connected(boxes: Iterable[tuple]) -> bool:
    """Connectivity under steps of l-infinity length 1."""
    boxes = set(boxes)
    if not boxes:
        return True
    start = next(iter(boxes))
    seen = {start}
    stack = [start]
    dim = len(start)
    offsets = [o for o in np.ndindex(*(3,) * dim)]
    while stack:
        b = stack.pop()
        for o in offsets:
            nb = tuple(c + oo - 1 for c, oo in zip(b, o))
            if nb in boxes and nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(boxes)


def partition_boxes(boxes: Iterable[tuple], r: float) -> list[set]:
    """Residue classes modulo ``w = ceil(r) + 1``; members of a class are > r apart in l-infinity."""
    if not r > 0:
        raise ValueError("r must be > 0")
    w = math.ceil(r) + 1
    parts: dict[tuple, set] = {}
    for b in boxes:
        parts.setdefault(tuple(c % w for c in b), set()).add(tuple(b))
    return [parts[key] for key in sorted(parts)]


def min_part_distance(part: set) -> float:
    pts = np.array(sorted(part))
    if len(pts) < 2:
        return math.inf
    diff = np.abs(pts[:, None, :] - pts[None, :, :]).max(axis=-1)
    np.fill_diagonal(diff, np.iinfo(diff.dtype).max)
    return float(diff.min())


# ---------------------------------------------------------------------------
# audits


def euclidean_length(path: GridPath) -> float:
    """Length of the space-time polyline ``(t, path(t))``."""
    steps = np.column_stack([np.full(path.steps, path.dt), np.diff(path.positions, axis=0)])
    return float(np.sum(np.sqrt(np.sum(steps * steps, axis=1))))


def length_bound_audit(paths: Sequence[GridPath], C: float = 1.0) -> dict:
    """Check ``length >= c m - C`` over a corpus.

    Reports the proof constants ``c = 2^-(d+1)``, ``C = 1`` and the largest
    ``c`` that works for the whole corpus at the given ``C``.
    """
    if not paths:
        raise ValueError("need at least one path")
    d = paths[0].d
    lengths = np.array([euclidean_length(p) for p in paths])
    ms = np.array([discretize_path(p).m for p in paths], dtype=float)
    c_theory = 1.0 / 2 ** (d + 1)
    c_fit = float(np.min((lengths + C) / ms))
    return {"lengths": lengths.tolist(), "m": ms.astype(int).tolist(),
            "c_theory": c_theory, "C_theory": 1.0,
            "margin_theory": (lengths - (c_theory * ms - 1.0)).tolist(),
            "holds_theory": bool(np.all(lengths >= c_theory * ms - 1.0)),
            "c_fit": c_fit, "C_fit": C,
            "margin_fit": (lengths - (c_fit * ms - C)).tolist()}


def box_infima(env, boxes: Iterable[tuple], density: int = 5) -> dict:
    """Approximate inf of F over each box by the minimum on a ``density^(d+1)`` sub-lattice."""
    boxes = sorted(boxes)
    if not boxes:
        return {}
    dim = len(boxes[0])
    offsets = np.array(list(np.ndindex(*(density,) * dim)), dtype=float) / (density - 1)
    pts = (np.asarray(boxes, dtype=float)[:, None, :] + offsets[None]).reshape(-1, dim)
    F = env.evaluate(pts[:, 0], pts[:, 1:], want=("F",))["F"].reshape(len(boxes), -1)
    return dict(zip(boxes, F.min(axis=1)))


def lower_bound_audit(env, L: KineticEnergy, grid: GridSpec, path: GridPath,
                      density: int = 5, M: float = 1.0) -> dict:
    """Both sides of the potential and action lower bounds along one path.

    ``q_path`` is the smallest q with (1/T) sum dt F(midpoints) >= -q m/T;
    ``q_boxes`` the smallest q with sum_k F*(k) >= -q m over the touched
    boxes.  ``C_needed`` is M m/T - A/T for the given M.
    """
    T = path.steps * grid.dt
    disc = discretize_path(path)
    m = disc.m
    tm, xm = path.midpoints()
    F = env.evaluate(tm, xm, want=("F",))["F"]
    pot_avg = float(np.sum(grid.dt * F) / T)
    infima = box_infima(env, disc.boxes, density)
    box_sum = float(sum(infima.values()))
    action = action_of_path(env, L, grid, Frame(v=(0.0,) * grid.d), path)
    return {"T": T, "m": m, "potential_average": pot_avg,
            "q_path": max(0.0, -pot_avg * T / m), "box_sum": box_sum,
            "q_boxes": max(0.0, -box_sum / m), "density": density,
            "action_per_time": action / T, "m_per_time": m / T,
            "M": M, "C_needed": M * m / T - action / T}


def q_stabilization(reports: Sequence[dict], key: str = "q_boxes") -> list[float]:
    """Running maximum of the required q over a growing ensemble."""
    return np.maximum.accumulate([r[key] for r in reports]).tolist()


def m_growth_audit(paths_by_T: dict, factor: float = 2.0) -> dict:
    """Series of mean m(gamma^T)/T over checkpoints; flags growth beyond ``factor``."""
    Ts = sorted(paths_by_T)
    series = []
    floor_ok = True
    for T in Ts:
        ms = [discretize_path(p).m for p in paths_by_T[T]]
        floor_ok &= all(m >= math.floor(T + 1e-9) for m in ms)
        series.append(float(np.mean(ms)) / T)
    s = np.asarray(series)
    return {"T": Ts, "m_over_T": series, "above_floor": bool(floor_ok),
            "unbounded": bool(s.max() / s.min() > factor)}


# ---------------------------------------------------------------------------
# HJB residual


def hjb_residual(stack: ActionStack, env, L: KineticEnergy, skip: int = 2,
                 tol: float | None = None) -> dict:
    """Finite-difference residual dA/dt + H(grad A) - F on the value table.

    Cells need finite values at all stencil neighbours and a slice index in
    ``[skip, K - 1]``.  A cell is smooth when forward and backward spatial
    differences agree within ``tol`` on every axis and a kink when they
    differ by more than ``10 tol``, the same test applying to forward and
    backward time differences; only smooth cells enter the summary.
    ``tol`` defaults to a twentieth of the velocity lattice spacing dx/dt.
    """
    if any(c != 0.0 for c in stack.frame.v):
        raise ValueError("residual needs an unsheared stack")
    grid = stack.grid
    dt, dx = grid.dt, grid.dx
    tol = 0.05 * dx / dt if tol is None else tol
    A = stack.values
    K = A.shape[0] - 1
    d = A.ndim - 1
    inner = (slice(skip, K),) + (slice(1, -1),) * d
    center = A[inner]
    later = A[(slice(skip + 1, K + 1),) + inner[1:]]
    earlier = A[(slice(skip - 1, K - 1),) + inner[1:]]
    finite = np.isfinite(center) & np.isfinite(later) & np.isfinite(earlier)
    with np.errstate(invalid="ignore"):
        dA_dt = (later - earlier) / (2 * dt)
        # kinks crossing the time stencil count too
        mismatch = np.abs((later - center) / dt - (center - earlier) / dt)
    grads = []
    for j in range(d):
        fwd_sl = list(inner)
        bwd_sl = list(inner)
        fwd_sl[1 + j] = slice(2, None)
        bwd_sl[1 + j] = slice(None, -2)
        up, down = A[tuple(fwd_sl)], A[tuple(bwd_sl)]
        finite &= np.isfinite(up) & np.isfinite(down)
        with np.errstate(invalid="ignore"):
            grads.append((up - down) / (2 * dx))
            mismatch = np.maximum(mismatch, np.abs((up - center) / dx - (center - down) / dx))
    smooth = finite & (mismatch <= tol)
    kink = finite & (mismatch > 10 * tol)
    residual = np.full(center.shape, np.nan)
    idx = np.nonzero(smooth)
    if len(idx[0]):
        grad = np.stack([g[idx] for g in grads], axis=-1)
        times = (stack.start_step + skip + idx[0]) * dt
        coords = np.stack([(stack.lo[j] + 1 + idx[1 + j]) * dx for j in range(d)], axis=-1)
        F = env.evaluate(times, coords, want=("F",))["F"]
        residual[idx] = dA_dt[idx] + legendre(L, grad) - F
    vals = np.abs(residual[idx]) if len(idx[0]) else np.zeros(0)
    return {"residual": residual,
            "median": float(np.median(vals)) if len(vals) else math.nan,
            "q90": float(np.quantile(vals, 0.9)) if len(vals) else math.nan,
            "n_smooth": int(smooth.sum()), "n_kink": int(kink.sum()),
            "n_ambiguous": int((finite & ~smooth & ~kink).sum()), "tol": tol}
