"""Monte Carlo estimates of the effective Lagrangian and related limits.

Every estimator here is built from per-seed exact solves:

* one point-to-point solve from the origin per seed answers every slope
  ``v`` and every horizon ``T`` at once (the value table holds A(t, x) for
  all slices t and nodes x);
* the gradient estimator averages ``grad L(velocity) + Theta`` along the
  extracted minimizer;
* loop solves in a sheared frame give the (alpha, beta) panel.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .environment import SPATIAL_HESSIAN_SUP, EnvironmentSpec, sample_environment
from .kinetics import KineticEnergy, discrete_legendre, grad_L, sup_hess_norm
from .solver import (BoundaryHitError, Frame, GridPath, GridSpec, extract_minimizer,
                     grid_window, path_step_costs, solve)

DEFAULT_MARGIN = 30.0


# ---------------------------------------------------------------------------
# helpers


def _make_env(env_spec, grid: GridSpec, seed: int, frame: Frame | None = None, steps=None):
    """Sample the seed's cloud over the solve's footprint; deterministic fields pass through."""
    if isinstance(env_spec, EnvironmentSpec):
        window = grid_window(grid, frame, env_spec.r_t_max, steps=steps)
        return sample_environment(env_spec.with_seed(seed), window)
    return env_spec


def _stderr(values: np.ndarray, axis: int = 0):
    n = values.shape[axis]
    if n < 2:
        return np.full(np.delete(values.shape, axis), np.nan)
    return np.std(values, axis=axis, ddof=1) / math.sqrt(n)


def _check_steps(T_checkpoints, dt: float) -> list[int]:
    steps = []
    for T in T_checkpoints:
        k = round(T / dt)
        if k < 1 or abs(k * dt - T) > 1e-9 * max(1.0, abs(T)):
            raise ValueError(f"checkpoint T={T} is not a positive multiple of dt={dt}")
        steps.append(int(k))
    return steps


def fit_domain(grid: GridSpec, targets: np.ndarray, margin: float = DEFAULT_MARGIN) -> GridSpec:
    """Grid whose domain covers every target position plus ``margin`` per axis.

    ``targets`` has shape (n, d); the origin is always included.
    """
    if grid.half_extent is not None:
        return grid
    pts = np.vstack([np.zeros((1, grid.d)), np.asarray(targets, dtype=float).reshape(-1, grid.d)])
    lo = np.floor((pts.min(axis=0) - margin) / grid.dx)
    hi = np.ceil((pts.max(axis=0) + margin) / grid.dx)
    center = np.floor((lo + hi) / 2).astype(np.int64)
    half = np.ceil((hi - lo) / 2).astype(np.int64) + 1
    cone = grid.steps * grid.window
    half = np.minimum(half, cone)
    return grid.with_(half_extent=tuple(int(h) for h in half), center=tuple(int(c) for c in center))


def path_gradient_integrand(env, L: KineticEnergy, path: GridPath) -> np.ndarray:
    """(1/T) sum_k dt [grad L(u_k) + Theta(t_k + dt/2, midpoint_k)]."""
    tm, xm = path.midpoints()
    vel = path.velocities
    theta = env.evaluate(tm, xm, want=("theta",))["theta"]
    T = path.steps * path.dt
    return np.sum(path.dt * (grad_L(L, vel) + theta), axis=0) / T


def path_time_averages(env, L: KineticEnergy, grid: GridSpec, frame: Frame,
                       path: GridPath) -> tuple[float, float]:
    """Kinetic and potential time averages (1/T) sum dt L(u+v), (1/T) sum dt F_v."""
    unit = Frame(v=frame.v, alpha=1.0, beta=1.0)
    kin, pot = path_step_costs(env, L, grid, unit, path)
    T = path.steps * grid.dt
    return float(np.sum(kin) / T), float(np.sum(pot) / T)


def path_second_order(env, L: KineticEnergy, path: GridPath, delta0: float) -> tuple[float, float]:
    """Second-order error integrands along a minimizer in original coordinates.

    M: time average of sup_{|r| <= delta0} ||hess L(u + r)||.
    N: time average over midpoints of sum_i (t - t_i)^2 times an envelope of
    sup_{|r| <= 1} ||hess phi_i(t - t_i, x - x_i + (t - t_i) r)||, namely
    |a_i| g((t - t_i)/r_t) 6/r_x^2 on |t - t_i| < r_t, |x - x_i| < r_x + |t - t_i|.
    """
    T = path.steps * path.dt
    M = float(np.sum(path.dt * sup_hess_norm(L, path.velocities, delta0)) / T)
    if not hasattr(env, "_candidates") or len(env) == 0:
        return M, 0.0
    tm, xm = path.midpoints()
    q, p = env._candidates(tm, xm, np.ones(env.d))
    lag = tm[q] - env.t[p]
    dist = np.sqrt(np.sum((xm[q] - env.x[p]) ** 2, axis=1))
    near = (np.abs(lag) < env.rt[p]) & (dist < env.rx[p] + np.abs(lag))
    q, p, lag = q[near], p[near], lag[near]
    tau = lag / env.rt[p]
    g = (1.0 - tau * tau) ** 2
    bound = np.abs(env.amp[p]) * g * SPATIAL_HESSIAN_SUP / (env.rx[p] * env.rx[p])
    per_step = np.bincount(q, weights=lag * lag * bound, minlength=path.steps)
    return M, float(np.sum(path.dt * per_step) / T)


# ---------------------------------------------------------------------------
# shape function and gradient


@dataclass
class ShapeEstimate:
    """Per-seed normalized actions A_*^T(v)/T and gradient estimates for one slope."""

    v: tuple
    T_checkpoints: list
    seeds: list
    lambda_series: np.ndarray          # (n_seeds, n_T)
    grad_series: np.ndarray | None     # (n_seeds, n_T, d)
    snap_error: float = 0.0
    flags: list = field(default_factory=list)

    @property
    def lambda_hat(self) -> float:
        return float(np.mean(self.lambda_series[:, -1]))

    @property
    def stderr(self) -> float:
        return float(_stderr(self.lambda_series[:, -1]))

    @property
    def grad_hat(self) -> np.ndarray | None:
        if self.grad_series is None:
            return None
        return np.mean(self.grad_series[:, -1, :], axis=0)

    @property
    def grad_stderr(self) -> np.ndarray | None:
        if self.grad_series is None:
            return None
        return _stderr(self.grad_series[:, -1, :])

    def convergence_table(self) -> list[tuple]:
        """Rows (T, mean, stderr) of the normalized action."""
        means = self.lambda_series.mean(axis=0)
        errs = _stderr(self.lambda_series)
        return [(float(T), float(m), float(e)) for T, m, e in zip(self.T_checkpoints, means, errs)]

    def richardson(self) -> float | None:
        """Two-point a + b/T extrapolation from the largest checkpoints; diagnostic only."""
        if len(self.T_checkpoints) < 2:
            return None
        T1, T2 = self.T_checkpoints[-2:]
        m1, m2 = self.lambda_series[:, -2].mean(), self.lambda_series[:, -1].mean()
        return float((T2 * m2 - T1 * m1) / (T2 - T1))

    def to_dict(self) -> dict:
        out = {"v": list(self.v), "T_checkpoints": list(self.T_checkpoints),
               "seeds": list(self.seeds), "lambda_series": self.lambda_series.tolist(),
               "lambda_hat": self.lambda_hat, "stderr": self.stderr,
               "snap_error": self.snap_error, "flags": list(self.flags)}
        if self.grad_series is not None:
            out["grad_series"] = self.grad_series.tolist()
            out["grad_hat"] = self.grad_hat.tolist()
            out["grad_stderr"] = self.grad_stderr.tolist()
        return out


def _survey_seed(args):
    env_spec, L, grid, vs, steps, seed, with_gradient = args
    env = _make_env(env_spec, grid, seed)
    stack = solve(env, L, grid)
    nv, nT = len(vs), len(steps)
    lam = np.empty((nv, nT))
    grads = np.empty((nv, nT, grid.d)) if with_gradient else None
    for i, v in enumerate(vs):
        for j, k in enumerate(steps):
            T = k * grid.dt
            node = np.rint(T * v / grid.dx).astype(np.int64)
            lam[i, j] = stack.value(node, k) / T
            try:
                path = extract_minimizer(stack, node, k)
            except BoundaryHitError as err:
                raise BoundaryHitError(f"seed {seed}: {err}", step=err.step) from err
            if with_gradient:
                grads[i, j] = path_gradient_integrand(env, L, path)
    return lam, grads


def shape_survey(env_spec, L: KineticEnergy, grid: GridSpec, vs: Sequence, T_checkpoints: Sequence[float],
                 seeds: Sequence[int], with_gradient: bool = False, workers: int = 1,
                 margin: float = DEFAULT_MARGIN) -> list[ShapeEstimate]:
    """Shape estimates for several slopes from one solve per seed."""
    vs = [np.atleast_1d(np.asarray(v, dtype=float)).reshape(grid.d) for v in vs]
    steps = _check_steps(T_checkpoints, grid.dt)
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValueError("T checkpoints must be strictly increasing")
    grid = grid.with_(steps=max(steps))
    targets = np.array([k * grid.dt * v for v in vs for k in steps])
    grid = fit_domain(grid, targets, margin)
    jobs = [(env_spec, L, grid, vs, steps, int(s), with_gradient) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_survey_seed, jobs))
    else:
        results = [_survey_seed(job) for job in jobs]
    flags = [] if len(seeds) >= 2 else ["fewer than 2 seeds: stderr undefined"]
    out = []
    for i, v in enumerate(vs):
        lam = np.array([r[0][i] for r in results]).reshape(len(seeds), len(steps))
        grads = None
        if with_gradient:
            grads = np.array([r[1][i] for r in results]).reshape(len(seeds), len(steps), grid.d)
        snap = max(float(np.max(np.abs(k * grid.dt * v - np.rint(k * grid.dt * v / grid.dx) * grid.dx)))
                   for k in steps)
        if not np.all(np.isfinite(lam)):
            flags_v = flags + ["unreachable target at some checkpoint"]
        else:
            flags_v = list(flags)
        out.append(ShapeEstimate(tuple(float(c) for c in v), [k * grid.dt for k in steps],
                                 [int(s) for s in seeds], lam, grads, snap, flags_v))
    return out


def estimate_shape(env_spec, L, grid, v, T_checkpoints, seeds, **kwargs) -> ShapeEstimate:
    return shape_survey(env_spec, L, grid, [v], T_checkpoints, seeds, **kwargs)[0]


def estimate_gradient(env_spec, L, grid, v, T, seeds, **kwargs) -> tuple[np.ndarray, np.ndarray]:
    est = shape_survey(env_spec, L, grid, [v], [T], seeds, with_gradient=True, **kwargs)[0]
    return est.grad_hat, est.grad_stderr


def finite_difference_gradient(estimates: dict, v: float, h: float) -> tuple[float, float]:
    """Central difference of lambda_hat in d = 1 with common random numbers.

    ``estimates`` maps slope -> ShapeEstimate sharing the same seeds.  The
    stderr is taken over per-seed differences.
    """
    plus, minus = estimates[v + h], estimates[v - h]
    if plus.seeds != minus.seeds:
        raise ValueError("finite difference needs common seeds")
    diff = (plus.lambda_series[:, -1] - minus.lambda_series[:, -1]) / (2 * h)
    return float(diff.mean()), float(_stderr(diff))


# ---------------------------------------------------------------------------
# (alpha, beta) panel


@dataclass
class PanelEstimate:
    v: tuple
    alphas: list
    betas: list
    seeds: list
    T: float
    B: np.ndarray       # (n_seeds, n_alpha, n_beta) loop actions B_*^T
    Lbar: np.ndarray    # same shape; (1/T) sum dt L(u + v) along the minimizer
    Fbar: np.ndarray    # same shape; (1/T) sum dt F_v along the minimizer

    @property
    def lambda_hat(self) -> np.ndarray:
        return self.B.mean(axis=0) / self.T

    def concavity_violations(self, slack: float = 1e-9) -> list[tuple]:
        """(seed, cell1, cell2) where B(midpoint) < mean(B(cell1), B(cell2)) - slack."""
        cells = list(itertools.product(range(len(self.alphas)), range(len(self.betas))))
        bad = []
        for (a1, b1), (a2, b2) in itertools.combinations(cells, 2):
            if (a1 + a2) % 2 or (b1 + b2) % 2:
                continue
            am, bm = (a1 + a2) // 2, (b1 + b2) // 2
            if not (_is_midpoint(self.alphas, a1, a2, am) and _is_midpoint(self.betas, b1, b2, bm)):
                continue
            lhs = self.B[:, am, bm]
            rhs = 0.5 * (self.B[:, a1, b1] + self.B[:, a2, b2])
            for s in np.nonzero(lhs < rhs - slack)[0]:
                bad.append((self.seeds[s], (a1, b1), (a2, b2)))
        return bad

    def envelope_violations(self, slack: float = 1e-9) -> list[tuple]:
        """Cells where B(a', b) > B(a, b) + (a' - a) T Lbar(a, b) + slack, and the beta analogue."""
        bad = []
        na, nb = len(self.alphas), len(self.betas)
        for i, j, i2 in itertools.product(range(na), range(nb), range(na)):
            bound = self.B[:, i, j] + (self.alphas[i2] - self.alphas[i]) * self.T * self.Lbar[:, i, j]
            for s in np.nonzero(self.B[:, i2, j] > bound + slack)[0]:
                bad.append((self.seeds[s], "alpha", (i, j), i2))
        for i, j, j2 in itertools.product(range(na), range(nb), range(nb)):
            bound = self.B[:, i, j] + (self.betas[j2] - self.betas[j]) * self.T * self.Fbar[:, i, j]
            for s in np.nonzero(self.B[:, i, j2] > bound + slack)[0]:
                bad.append((self.seeds[s], "beta", (i, j), j2))
        return bad

    def to_dict(self) -> dict:
        return {"v": list(self.v), "alphas": list(self.alphas), "betas": list(self.betas),
                "seeds": list(self.seeds), "T": self.T, "B": self.B.tolist(),
                "Lbar": self.Lbar.tolist(), "Fbar": self.Fbar.tolist(),
                "lambda_hat": self.lambda_hat.tolist()}


def _is_midpoint(grid, i, j, m) -> bool:
    return math.isclose(grid[m], 0.5 * (grid[i] + grid[j]), rel_tol=1e-12, abs_tol=1e-12)


def panel_alpha_beta(env_spec, L: KineticEnergy, grid: GridSpec, v, alpha_grid: Sequence[float],
                     beta_grid: Sequence[float], seeds: Sequence[int]) -> PanelEstimate:
    """Loop solves B_*^T(v, alpha, beta) on an (alpha, beta) lattice, one cloud per seed."""
    if min(alpha_grid) <= 0 or min(beta_grid) <= 0:
        raise ValueError("alpha and beta must be > 0")
    v = tuple(float(c) for c in np.atleast_1d(v))
    shape = (len(seeds), len(alpha_grid), len(beta_grid))
    B, Lbar, Fbar = np.empty(shape), np.empty(shape), np.empty(shape)
    origin = np.zeros(grid.d, dtype=np.int64)
    for s_i, seed in enumerate(seeds):
        env = _make_env(env_spec, grid, int(seed), Frame(v=v))
        for (a_i, a), (b_i, b) in itertools.product(enumerate(alpha_grid), enumerate(beta_grid)):
            frame = Frame(v=v, alpha=a, beta=b)
            stack = solve(env, L, grid, frame)
            path = extract_minimizer(stack, origin)
            B[s_i, a_i, b_i] = stack.value(origin)
            Lbar[s_i, a_i, b_i], Fbar[s_i, a_i, b_i] = path_time_averages(env, L, grid, frame, path)
    return PanelEstimate(v, list(alpha_grid), list(beta_grid), [int(s) for s in seeds], grid.T, B, Lbar, Fbar)


# ---------------------------------------------------------------------------
# homogenization


@dataclass
class HomogenizationCurve:
    t: float
    x: tuple
    epsilons: list
    seeds: list
    scaled: np.ndarray      # (n_seeds, n_eps): eps * A(t/eps, x/eps)
    reference: float        # t * lambda_hat(x/t)

    @property
    def gaps(self) -> np.ndarray:
        return np.abs(self.scaled - self.reference)

    @property
    def mean_gap(self) -> np.ndarray:
        """Mean over seeds of |eps A - t lambda_hat|."""
        return self.gaps.mean(axis=0)

    @property
    def bias(self) -> np.ndarray:
        """|mean over seeds of eps A - t lambda_hat|."""
        return np.abs(self.scaled.mean(axis=0) - self.reference)

    def table(self) -> list[tuple]:
        return [(float(e), float(g), float(b)) for e, g, b in zip(self.epsilons, self.mean_gap, self.bias)]

    def to_dict(self) -> dict:
        return {"t": self.t, "x": list(self.x), "epsilons": list(self.epsilons), "seeds": list(self.seeds),
                "scaled": self.scaled.tolist(), "reference": self.reference,
                "mean_gap": self.mean_gap.tolist(), "bias": self.bias.tolist()}


def homogenization_curve(env_spec, L: KineticEnergy, grid: GridSpec, t: float, x, epsilons: Sequence[float],
                         seeds: Sequence[int], reference: float | None = None,
                         reference_T: float = 200.0, margin: float = DEFAULT_MARGIN) -> HomogenizationCurve:
    """eps * A(t/eps, x/eps) per seed and eps, against t * lambda_hat(x/t).

    One solve per seed reaches the largest horizon; smaller horizons are read
    from earlier slices.  ``reference`` defaults to a shape estimate at
    ``reference_T`` with the same seeds.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(grid.d)
    horizons = [t / e for e in epsilons]
    steps = _check_steps(horizons, grid.dt)
    targets = np.array([x / e for e in epsilons])
    nodes = np.rint(targets / grid.dx).astype(np.int64)
    if np.any(np.abs(targets - nodes * grid.dx) > 1e-9):
        raise ValueError("x/eps must sit on the grid for every eps")
    run = fit_domain(grid.with_(steps=max(steps)), targets, margin)
    scaled = np.empty((len(seeds), len(epsilons)))
    for s_i, seed in enumerate(seeds):
        env = _make_env(env_spec, run, int(seed))
        stack = solve(env, L, run)
        for e_i, (eps, k, node) in enumerate(zip(epsilons, steps, nodes)):
            scaled[s_i, e_i] = eps * stack.value(node, k)
    if reference is None:
        est = estimate_shape(env_spec, L, grid, x / t, [reference_T], seeds, margin=margin)
        reference = t * est.lambda_hat
    return HomogenizationCurve(float(t), tuple(x.tolist()), list(epsilons), [int(s) for s in seeds],
                               scaled, float(reference))


# ---------------------------------------------------------------------------
# effective Hamiltonian


def effective_hamiltonian(estimates: Sequence[ShapeEstimate], p_grid: Sequence) -> dict:
    """Discrete Legendre transform of lambda_hat plus convexity diagnostics.

    ``monotonicity`` is min over distinct slope pairs of
    <grad(v1) - grad(v2), v1 - v2> / |v1 - v2|^2; a positive value means no
    gradient collision was detected.
    """
    vs = np.array([e.v for e in estimates], dtype=float)
    if len(vs) < 3 or any(len(np.unique(vs[:, j])) < 3 for j in range(vs.shape[1])):
        raise ValueError("need at least 3 distinct slopes per axis")
    samples = [(e.v, e.lambda_hat) for e in estimates]
    ps = [np.atleast_1d(np.asarray(p, dtype=float)) for p in p_grid]
    H = np.array([discrete_legendre(samples, p) for p in ps])
    midpoint_ok = True
    if vs.shape[1] == 1 and len(ps) >= 3:
        pv = np.array([p[0] for p in ps])
        order = np.argsort(pv)
        pv, Hs = pv[order], H[order]
        for i in range(1, len(pv) - 1):
            if math.isclose(pv[i] - pv[i - 1], pv[i + 1] - pv[i], rel_tol=1e-9):
                midpoint_ok &= bool(Hs[i] <= 0.5 * (Hs[i - 1] + Hs[i + 1]) + 1e-12)
    mono = None
    if all(e.grad_hat is not None for e in estimates):
        vals = []
        for a, b in itertools.combinations(estimates, 2):
            dv = np.subtract(a.v, b.v)
            vals.append(float(np.dot(a.grad_hat - b.grad_hat, dv) / np.dot(dv, dv)))
        mono = min(vals)
    return {"p": [p.tolist() for p in ps], "H": H.tolist(), "midpoint_convex": bool(midpoint_ok),
            "monotonicity": mono}


def midpoint_convexity_violations(estimates: Sequence[ShapeEstimate], k_stderr: float = 3.0) -> list[tuple]:
    """Equally spaced d = 1 triples where lambda_hat(mid) exceeds the chord mean by > k pooled stderr."""
    ests = sorted(estimates, key=lambda e: e.v[0])
    bad = []
    for i, j in itertools.combinations(range(len(ests)), 2):
        if (i + j) % 2:
            continue
        m = (i + j) // 2
        if m in (i, j) or not math.isclose(ests[m].v[0], 0.5 * (ests[i].v[0] + ests[j].v[0]), abs_tol=1e-12):
            continue
        pooled = math.sqrt(ests[i].stderr ** 2 + ests[j].stderr ** 2 + ests[m].stderr ** 2)
        excess = ests[m].lambda_hat - 0.5 * (ests[i].lambda_hat + ests[j].lambda_hat)
        if excess > k_stderr * pooled:
            bad.append((ests[i].v[0], ests[m].v[0], ests[j].v[0], excess, pooled))
    return bad


# ---------------------------------------------------------------------------
# second-order audit


def second_order_audit(env, L: KineticEnergy, grid: GridSpec, v, T_checkpoints: Sequence[float],
                       delta0: float = 0.5, margin: float = DEFAULT_MARGIN) -> dict:
    """Series M_T, N_T along the minimizers gamma^T(v) of one environment.

    ``env`` may be a cloud or an EnvironmentSpec (sampled with its own seed).
    The minimizer is the shear image of the loop minimizer, so its velocity is
    u + v and the sheared bump envelope becomes an unsheared one with enlarged
    spatial support.
    """
    v = np.atleast_1d(np.asarray(v, dtype=float)).reshape(grid.d)
    steps = _check_steps(T_checkpoints, grid.dt)
    run = fit_domain(grid.with_(steps=max(steps)), np.array([k * grid.dt * v for k in steps]), margin)
    if isinstance(env, EnvironmentSpec):
        env = _make_env(env, run, env.seed)
    stack = solve(env, L, run)
    M, N = [], []
    for k in steps:
        node = np.rint(k * grid.dt * v / grid.dx).astype(np.int64)
        path = extract_minimizer(stack, node, k)
        m, n = path_second_order(env, L, path, delta0)
        M.append(m)
        N.append(n)
    return {"T": [k * grid.dt for k in steps], "M": M, "N": N, "delta0": delta0,
            "M_ratio": max(M) / min(M) if min(M) > 0 else None,
            "N_ratio": max(N) / min(N) if min(N) > 0 else None}


def bounded_series(series: Sequence[float], factor: float = 2.0) -> bool:
    """max/min of a nonnegative series within ``factor``; an all-zero series counts as bounded."""
    s = np.asarray(series, dtype=float)
    if np.all(s == 0):
        return True
    return bool(s.min() > 0 and s.max() / s.min() <= factor)
