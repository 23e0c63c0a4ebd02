"""Marked Poisson random potentials built from compactly supported bumps.

A realization is a finite cloud of space-time points ``(t_i, x_i)``, each
carrying a bump

    phi_i(s, u) = a_i * g(s / rt_i) * h(|u| / rx_i)

with ``g(q) = (1 - q^2)^2`` on ``|q| < 1`` and ``h(q) = (1 - q^2)^3`` on
``0 <= q < 1``.  The potential is the sum of the bumps,

    F(t, x) = sum_i phi_i(t - t_i, x - x_i),

and the sheared potential moves every bump along the shear direction,

    F_v(t, x) = sum_i phi_i(t - t_i, x + (t - t_i) v - x_i).

The cloud is sampled on a padded window so that every query inside the
unpadded window sees all of its contributing bumps.  Queries that would see a
truncated field raise :class:`DomainError`.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

FORMAT_VERSION = 1

SPATIAL_SHAPES = ("cubic-bump",)
TEMPORAL_SHAPES = ("quartic-bump",)
AMPLITUDE_KINDS = ("constant", "uniform", "exponential")

# one-ulp-ish slack for window containment tests
_EDGE_TOL = 1e-9


class ValidationError(ValueError):
    """Invalid configuration value; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DomainError(ValueError):
    """A query would read the field where the sampled cloud is truncated."""


# ---------------------------------------------------------------------------
# environment laws


@dataclass(frozen=True)
class BumpProfile:
    spatial_shape: str = "cubic-bump"
    temporal_shape: str = "quartic-bump"

    def validate(self) -> None:
        if self.spatial_shape not in SPATIAL_SHAPES:
            raise ValidationError("environment.profile.spatial_shape",
                                  f"unknown shape {self.spatial_shape!r}")
        if self.temporal_shape not in TEMPORAL_SHAPES:
            raise ValidationError("environment.profile.temporal_shape",
                                  f"unknown shape {self.temporal_shape!r}")


def spatial_profile(q):
    """h(q) = (1 - q^2)^3 for 0 <= q < 1, else 0."""
    q = np.asarray(q, dtype=float)
    base = 1.0 - q * q
    return np.where(np.abs(q) < 1.0, base * base * base, 0.0)


def temporal_profile(q):
    """g(q) = (1 - q^2)^2 for |q| < 1, else 0."""
    q = np.asarray(q, dtype=float)
    base = 1.0 - q * q
    return np.where(np.abs(q) < 1.0, base * base, 0.0)


# sup_q |h''(q)| and sup_q |h'(q)/q| for the cubic bump; both attained at q = 0
SPATIAL_HESSIAN_SUP = 6.0


@dataclass(frozen=True)
class AmplitudeDist:
    """Law of the bump amplitude.

    ``constant(a)``, ``uniform(lo, hi)`` or ``exponential(rate, sign)``; all
    three have exponential moments near zero.
    """

    kind: str = "uniform"
    params: tuple = (-1.0, 1.0)

    @classmethod
    def constant(cls, a: float) -> "AmplitudeDist":
        return cls("constant", (float(a),))

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "AmplitudeDist":
        return cls("uniform", (float(lo), float(hi)))

    @classmethod
    def exponential(cls, rate: float, sign: float = 1.0) -> "AmplitudeDist":
        return cls("exponential", (float(rate), float(sign)))

    def validate(self) -> None:
        name = "environment.amplitude"
        if self.kind not in AMPLITUDE_KINDS:
            raise ValidationError(
                name, f"unsupported law {self.kind!r}; only laws with "
                "exponential moments are accepted: " + ", ".join(AMPLITUDE_KINDS))
        p = tuple(float(x) for x in self.params)
        if not all(math.isfinite(x) for x in p):
            raise ValidationError(name, "parameters must be finite")
        if self.kind == "constant" and len(p) != 1:
            raise ValidationError(name, "constant takes one parameter")
        if self.kind == "uniform" and (len(p) != 2 or p[0] > p[1]):
            raise ValidationError(name, "uniform needs lo <= hi")
        if self.kind == "exponential":
            if len(p) != 2 or p[0] <= 0 or p[1] not in (-1.0, 1.0):
                raise ValidationError(name, "exponential needs rate > 0 and sign in {-1, 1}")

    def sample(self, u: np.ndarray) -> np.ndarray:
        """Inverse-CDF transform of uniforms on [0, 1)."""
        if self.kind == "constant":
            return np.full_like(u, self.params[0])
        if self.kind == "uniform":
            lo, hi = self.params
            return lo + (hi - lo) * u
        rate, sign = self.params
        return sign * (-np.log1p(-u) / rate)

    def mean(self) -> float:
        if self.kind == "constant":
            return self.params[0]
        if self.kind == "uniform":
            return 0.5 * (self.params[0] + self.params[1])
        return self.params[1] / self.params[0]

    def sup_abs(self) -> float:
        if self.kind == "constant":
            return abs(self.params[0])
        if self.kind == "uniform":
            return max(abs(self.params[0]), abs(self.params[1]))
        return math.inf


def _as_range(value, name: str) -> tuple[float, float]:
    if isinstance(value, (int, float)):
        return float(value), float(value)
    lo, hi = (float(v) for v in value)
    if lo > hi:
        raise ValidationError(name, "range must satisfy lo <= hi")
    return lo, hi


@dataclass(frozen=True)
class EnvironmentSpec:
    """Law of the marked Poisson potential.

    ``r_t`` and ``r_x`` are either a constant radius or a ``(lo, hi)`` range
    sampled uniformly.  ``r_t_max``/``r_x_max`` are the caps defining the
    common compact support of all bumps.
    """

    d: int = 1
    intensity: float = 1.0
    amplitude: AmplitudeDist = field(default_factory=AmplitudeDist)
    r_t: float | tuple = 1.0
    r_x: float | tuple = 1.0
    seed: int = 0
    r_t_max: float = 1.0
    r_x_max: float = 1.0
    profile: BumpProfile = field(default_factory=BumpProfile)

    def validate(self) -> "EnvironmentSpec":
        if not isinstance(self.d, (int, np.integer)) or self.d < 1:
            raise ValidationError("environment.d", "dimension must be an integer >= 1")
        if not math.isfinite(self.intensity) or self.intensity < 0:
            raise ValidationError("environment.intensity", "must be finite and >= 0")
        if self.r_t_max <= 0 or self.r_x_max <= 0:
            raise ValidationError("environment.r_max", "radius caps must be > 0")
        for name, value, cap in (("environment.r_t", self.r_t, self.r_t_max),
                                 ("environment.r_x", self.r_x, self.r_x_max)):
            lo, hi = _as_range(value, name)
            if lo <= 0:
                raise ValidationError(name, "radii must be > 0")
            if hi > cap:
                raise ValidationError(name, f"radius {hi} exceeds cap {cap}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("environment.seed", "seed must fit in 64 bits")
        self.amplitude.validate()
        self.profile.validate()
        return self

    def with_seed(self, seed: int) -> "EnvironmentSpec":
        return EnvironmentSpec(self.d, self.intensity, self.amplitude, self.r_t, self.r_x,
                               int(seed), self.r_t_max, self.r_x_max, self.profile)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["amplitude"] = {"kind": self.amplitude.kind, "params": list(self.amplitude.params)}
        for key in ("r_t", "r_x"):
            if isinstance(out[key], tuple):
                out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "EnvironmentSpec":
        data = dict(data)
        amp = data.pop("amplitude", None)
        if amp is not None:
            if isinstance(amp, AmplitudeDist):
                data["amplitude"] = amp
            else:
                data["amplitude"] = AmplitudeDist(str(amp.get("kind", "")),
                                                  tuple(amp.get("params", ())))
        prof = data.pop("profile", None)
        if prof is not None:
            data["profile"] = prof if isinstance(prof, BumpProfile) else BumpProfile(**prof)
        for key in ("r_t", "r_x"):
            if isinstance(data.get(key), list):
                data[key] = tuple(data[key])
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError("environment." + sorted(unknown)[0], "unknown field")
        return cls(**data)


STANDARD_ENVIRONMENT = EnvironmentSpec()


@dataclass(frozen=True)
class Box:
    """Closed space-time box ``[t_lo, t_hi] x prod [x_lo[j], x_hi[j]]``."""

    t_lo: float
    t_hi: float
    x_lo: tuple
    x_hi: tuple

    def __post_init__(self):
        object.__setattr__(self, "x_lo", tuple(float(v) for v in np.atleast_1d(self.x_lo)))
        object.__setattr__(self, "x_hi", tuple(float(v) for v in np.atleast_1d(self.x_hi)))

    @property
    def d(self) -> int:
        return len(self.x_lo)

    def validate(self) -> "Box":
        if not self.t_hi > self.t_lo or len(self.x_lo) != len(self.x_hi) or \
                any(not hi > lo for lo, hi in zip(self.x_lo, self.x_hi)):
            raise ValidationError("window", "window must be a non-degenerate box")
        return self

    def padded(self, pad_t: float, pad_x: float) -> "Box":
        return Box(self.t_lo - pad_t, self.t_hi + pad_t,
                   tuple(v - pad_x for v in self.x_lo), tuple(v + pad_x for v in self.x_hi))

    def volume(self) -> float:
        return (self.t_hi - self.t_lo) * float(np.prod(np.subtract(self.x_hi, self.x_lo)))

    def union(self, other: "Box") -> "Box":
        return Box(min(self.t_lo, other.t_lo), max(self.t_hi, other.t_hi),
                   tuple(np.minimum(self.x_lo, other.x_lo)), tuple(np.maximum(self.x_hi, other.x_hi)))


# ---------------------------------------------------------------------------
# bump kernel


def _bump_terms(dt, du, amp, rt, rx, want=("F",)):
    """Per-pair bump contributions.

    ``dt`` has shape (P,), ``du`` shape (P, d).  Returns a dict with the
    requested entries among ``F`` (P,), ``grad`` (P, d), ``hess`` (P, d, d);
    pairs outside the support contribute exact zeros.
    """
    tau = dt / rt
    w = 1.0 - tau * tau
    g = w * w
    s = np.sum(du * du, axis=-1) / (rx * rx)
    base = 1.0 - s
    inside = (np.abs(dt) < rt) & (s < 1.0)
    ag = np.where(inside, amp * g, 0.0)
    out = {}
    if "F" in want:
        out["F"] = ag * (base * base * base)
    if "grad" in want or "hess" in want:
        coef = ag * (-6.0 * base * base / (rx * rx))
        out["grad"] = coef[:, None] * du
        if "hess" in want:
            d = du.shape[1]
            outer = du[:, :, None] * du[:, None, :]
            c2 = ag * (24.0 * base / (rx * rx * rx * rx))
            out["hess"] = c2[:, None, None] * outer + coef[:, None, None] * np.eye(d)[None]
    return out


def _reduce(q_idx, p_idx, values, n_queries):
    """Sum per-pair values into queries, in ascending point order per query."""
    order = np.lexsort((p_idx, q_idx))
    q = q_idx[order]
    vals = values[order]
    if vals.ndim == 1:
        return np.bincount(q, weights=vals, minlength=n_queries)
    flat = vals.reshape(len(vals), int(np.prod(vals.shape[1:])))
    cols = [np.bincount(q, weights=flat[:, j], minlength=n_queries) for j in range(flat.shape[1])]
    return np.stack(cols, axis=-1).reshape((n_queries,) + vals.shape[1:])


def _expand_ranges(starts, counts):
    """Flattened ``[start, start + count)`` ranges plus the owning row of each entry."""
    counts = np.asarray(counts, dtype=np.int64)
    total = int(counts.sum())
    rows = np.repeat(np.arange(len(counts)), counts)
    if total == 0:
        return rows, np.zeros(0, dtype=np.int64)
    offsets = np.cumsum(counts) - counts
    within = np.arange(total, dtype=np.int64) - np.repeat(offsets, counts)
    return rows, np.repeat(np.asarray(starts, dtype=np.int64), counts) + within


# ---------------------------------------------------------------------------
# the cloud


class PoissonCloud:
    """Immutable realization of the marked Poisson process.

    Attributes are plain numpy arrays: ``t`` (n,), ``x`` (n, d), ``amp``,
    ``rt``, ``rx`` (n,).  ``box`` is the unpadded window in the cloud's own
    coordinates; after :func:`shear_cloud` the covered region is
    ``{(t, x): (t, x - t * shear) in box}``.
    """

    def __init__(self, t, x, amp, rt, rx, box: Box, spec: EnvironmentSpec,
                 shear=None):
        self.spec = spec
        self.d = spec.d
        self.t = np.ascontiguousarray(t, dtype=float).reshape(-1)
        self.x = np.ascontiguousarray(x, dtype=float).reshape(len(self.t), self.d)
        self.amp = np.ascontiguousarray(amp, dtype=float).reshape(-1)
        self.rt = np.ascontiguousarray(rt, dtype=float).reshape(-1)
        self.rx = np.ascontiguousarray(rx, dtype=float).reshape(-1)
        self.box = box
        self.pad_t = float(spec.r_t_max)
        self.pad_x = float(spec.r_x_max)
        self.shear = np.zeros(self.d) if shear is None else np.asarray(shear, dtype=float).reshape(self.d)
        for arr in (self.t, self.x, self.amp, self.rt, self.rx):
            arr.setflags(write=False)
        self._build_index()

    def __len__(self) -> int:
        return len(self.t)

    # -- index ---------------------------------------------------------------

    def _build_index(self):
        self.bin_side = max(self.pad_t, self.pad_x)
        self._t_order = np.argsort(self.t, kind="stable")
        self._t_sorted = self.t[self._t_order]
        if len(self.t) == 0:
            self._origin = np.zeros(self.d + 1)
            self._dims = np.ones(self.d + 1, dtype=np.int64)
            self._bin_start = np.zeros(2, dtype=np.int64)
            self._bin_points = np.zeros(0, dtype=np.int64)
            return
        coords = np.column_stack([self.t, self.x])
        self._origin = coords.min(axis=0)
        cells = np.floor((coords - self._origin) / self.bin_side).astype(np.int64)
        self._dims = cells.max(axis=0) + 1
        keys = np.ravel_multi_index(tuple(cells.T), tuple(self._dims))
        order = np.argsort(keys, kind="stable")
        self._bin_points = order
        counts = np.bincount(keys, minlength=int(np.prod(self._dims)))
        self._bin_start = np.concatenate([[0], np.cumsum(counts)])

    def _candidates(self, t, x, v):
        """Candidate (query, point) pairs whose bump may reach the query."""
        nq = len(t)
        if len(self.t) == 0 or nq == 0:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty
        radius = np.full(self.d + 1, 0.0)
        radius[0] = self.pad_t
        radius[1:] = self.pad_x + self.pad_t * np.abs(v)
        reach = np.ceil(radius / self.bin_side).astype(np.int64)
        qcells = np.floor((np.column_stack([t, x]) - self._origin) / self.bin_side).astype(np.int64)
        axes = [np.arange(-k, k + 1) for k in reach]
        grids = np.meshgrid(*axes, indexing="ij")
        offsets = np.stack([g.ravel() for g in grids], axis=1)
        q_all, p_all = [], []
        for off in offsets:
            cells = qcells + off
            ok = np.all((cells >= 0) & (cells < self._dims), axis=1)
            if not ok.any():
                continue
            qs = np.nonzero(ok)[0]
            keys = np.ravel_multi_index(tuple(cells[qs].T), tuple(self._dims))
            starts = self._bin_start[keys]
            counts = self._bin_start[keys + 1] - starts
            rows, slots = _expand_ranges(starts, counts)
            q_all.append(qs[rows])
            p_all.append(self._bin_points[slots])
        if not q_all:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty
        return np.concatenate(q_all), np.concatenate(p_all)

    # -- coverage ------------------------------------------------------------

    def check_coverage(self, t, x, v=None):
        """Raise :class:`DomainError` unless every query sees an untruncated field.

        For the sheared field at ``(t, x)`` the contributing points lie in
        ``|s - t| < r_t_max``, ``|y - x - (t - s) v| < r_x_max``; in the
        window's own coordinates this is a box around ``x - t * shear`` of
        half-width ``r_t_max |v + shear| + r_x_max``, which must sit inside the
        padded window.
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x = np.asarray(x, dtype=float).reshape(len(t), self.d)
        v = np.zeros(self.d) if v is None else np.asarray(v, dtype=float).reshape(self.d)
        lo = np.asarray(self.box.x_lo)
        hi = np.asarray(self.box.x_hi)
        spread = self.pad_t * np.abs(v + self.shear)
        y = x - t[:, None] * self.shear
        tol = _EDGE_TOL * (1.0 + np.abs(y))
        bad_x = np.any((y - spread < lo - tol) | (y + spread > hi + tol), axis=1)
        bad_t = (t < self.box.t_lo - _EDGE_TOL * (1 + abs(self.box.t_lo))) | \
                (t > self.box.t_hi + _EDGE_TOL * (1 + abs(self.box.t_hi)))
        bad = bad_x | bad_t
        if bad.any():
            i = int(np.nonzero(bad)[0][0])
            raise DomainError(f"query (t={t[i]:.6g}, x={x[i].tolist()}, v={v.tolist()}) "
                              f"reads outside the sampled window {self.box}")

    # -- evaluation ----------------------------------------------------------

    def evaluate(self, t, x, v=None, want=("F",), check=True):
        """Batch evaluation of F_v (``v=None`` means v = 0) and its derivatives.

        ``want`` may contain ``F``, ``grad``, ``hess``, ``theta``.  Returns a
        dict of arrays with a leading query axis.
        """
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x = np.asarray(x, dtype=float).reshape(len(t), self.d)
        vv = np.zeros(self.d) if v is None else np.asarray(v, dtype=float).reshape(self.d)
        if check:
            self.check_coverage(t, x, vv)
        q, p = self._candidates(t, x, vv)
        return self._accumulate(q, p, t, x, vv, want)

    def evaluate_bruteforce(self, t, x, v=None, want=("F",)):
        """Linear scan over all points; the oracle for :meth:`evaluate`."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x = np.asarray(x, dtype=float).reshape(len(t), self.d)
        vv = np.zeros(self.d) if v is None else np.asarray(v, dtype=float).reshape(self.d)
        q = np.repeat(np.arange(len(t)), len(self.t))
        p = np.tile(np.arange(len(self.t)), len(t))
        return self._accumulate(q, p, t, x, vv, want, prefilter=False)

    def _accumulate(self, q, p, t, x, v, want, prefilter=True):
        nq = len(t)
        dt = t[q] - self.t[p]
        du = (x[q] - self.x[p]) + dt[:, None] * v
        if prefilter and len(q):
            keep = (np.abs(dt) < self.rt[p]) & \
                   (np.sum(du * du, axis=1) / (self.rx[p] * self.rx[p]) < 1.0)
            q, p, dt, du = q[keep], p[keep], dt[keep], du[keep]
        kernel_want = {"F"} if "F" in want else set()
        if {"grad", "theta", "hess"} & set(want):
            kernel_want.add("grad")
        if "hess" in want:
            kernel_want.add("hess")
        terms = _bump_terms(dt, du, self.amp[p], self.rt[p], self.rx[p], tuple(kernel_want))
        out = {}
        if "F" in want:
            out["F"] = _reduce(q, p, terms["F"], nq)
        if "grad" in want:
            out["grad"] = _reduce(q, p, terms["grad"], nq)
        if "theta" in want:
            out["theta"] = _reduce(q, p, dt[:, None] * terms["grad"], nq)
        if "hess" in want:
            out["hess"] = _reduce(q, p, terms["hess"], nq)
        return out

    def lattice_F(self, t: float, start, shape, spacing: float, v=None, check=True):
        """F_v(t, .) on the lattice ``x_j = (start + j) * spacing``.

        Rasterizes each active bump onto the lattice block it covers.  Values
        agree bit-for-bit with :meth:`evaluate` at the same coordinates.
        """
        start = np.asarray(start, dtype=np.int64).reshape(self.d)
        shape = tuple(int(n) for n in np.atleast_1d(shape))
        vv = np.zeros(self.d) if v is None else np.asarray(v, dtype=float).reshape(self.d)
        t = float(t)
        if check:
            corners = np.array(np.meshgrid(*[[start[j], start[j] + shape[j] - 1]
                                             for j in range(self.d)], indexing="ij"))
            corners = corners.reshape(self.d, -1).T * spacing
            self.check_coverage(np.full(len(corners), t), corners, vv)
        out = np.zeros(int(np.prod(shape)))
        lo = np.searchsorted(self._t_sorted, t - self.pad_t, side="left")
        hi = np.searchsorted(self._t_sorted, t + self.pad_t, side="right")
        pts = self._t_order[lo:hi]
        if len(pts) == 0:
            return out.reshape(shape)
        dt = t - self.t[pts]
        pts = pts[np.abs(dt) < self.rt[pts]]
        if len(pts) == 0:
            return out.reshape(shape)
        dt = t - self.t[pts]
        centers = self.x[pts] - dt[:, None] * vv
        # index range per axis (one node of slack; exact support test follows)
        first = np.floor((centers - self.rx[pts, None]) / spacing).astype(np.int64) - start - 1
        last = np.ceil((centers + self.rx[pts, None]) / spacing).astype(np.int64) - start + 1
        first = np.clip(first, 0, np.asarray(shape) - 1)
        last = np.clip(last, -1, np.asarray(shape) - 1)
        counts = np.maximum(last - first + 1, 0)
        rows = np.arange(len(pts))
        idx = np.zeros((len(pts), 0), dtype=np.int64)
        for j in range(self.d):
            r, k = _expand_ranges(first[rows, j], counts[rows, j])
            idx = np.column_stack([idx[r], k])
            rows = rows[r]
        p = pts[rows]
        flat = np.ravel_multi_index(tuple(idx.T), shape) if len(p) else np.zeros(0, dtype=np.int64)
        xq = (start[None, :] + idx) * spacing
        dtp = t - self.t[p]
        du = (xq - self.x[p]) + dtp[:, None] * vv
        keep = np.sum(du * du, axis=1) / (self.rx[p] * self.rx[p]) < 1.0
        p, flat, dtp, du = p[keep], flat[keep], dtp[keep], du[keep]
        terms = _bump_terms(dtp, du, self.amp[p], self.rt[p], self.rx[p], ("F",))
        out = _reduce(flat, p, terms["F"], len(out))
        return out.reshape(shape)

    # -- identity ------------------------------------------------------------

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.t, self.x, self.amp, self.rt, self.rx, self.shear):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr(self.box).encode())
        return h.hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, PoissonCloud):
            return NotImplemented
        return (self.spec == other.spec and self.box == other.box
                and all(np.array_equal(a, b) for a, b in (
                    (self.t, other.t), (self.x, other.x), (self.amp, other.amp),
                    (self.rt, other.rt), (self.rx, other.rx), (self.shear, other.shear))))

    __hash__ = None


class ConstantField:
    """Deterministic field F == value; stands in for a cloud in solver tests."""

    def __init__(self, value: float, d: int = 1):
        self.value = float(value)
        self.d = d

    def evaluate(self, t, x, v=None, want=("F",), check=True):
        n = len(np.atleast_1d(t))
        out = {}
        if "F" in want:
            out["F"] = np.full(n, self.value)
        for key in ("grad", "theta"):
            if key in want:
                out[key] = np.zeros((n, self.d))
        if "hess" in want:
            out["hess"] = np.zeros((n, self.d, self.d))
        return out

    def lattice_F(self, t, start, shape, spacing, v=None, check=True):
        return np.full(tuple(np.atleast_1d(shape)), self.value)

    def check_coverage(self, t, x, v=None):
        return None

    def digest(self) -> str:
        return f"const:{self.value!r}"


# ---------------------------------------------------------------------------
# sampling and transformations


def sample_environment(spec: EnvironmentSpec, window: Box) -> PoissonCloud:
    """Sample the cloud on ``window`` padded by the radius caps.

    Randomness comes from Philox streams keyed by the seed: one stream for the
    point count and one for the points, where point ``i`` consumes the fixed
    counter block ``i`` of the second stream.
    """
    spec.validate()
    window = window.validate()
    if window.d != spec.d:
        raise ValidationError("window", f"window dimension {window.d} != d={spec.d}")
    padded = window.padded(spec.r_t_max, spec.r_x_max)
    count_seq, point_seq = np.random.SeedSequence(int(spec.seed)).spawn(2)
    mean = spec.intensity * padded.volume()
    n = int(np.random.Generator(np.random.Philox(count_seq)).poisson(mean)) if mean > 0 else 0
    d = spec.d
    u = np.random.Generator(np.random.Philox(point_seq)).random((n, d + 4))
    t = padded.t_lo + (padded.t_hi - padded.t_lo) * u[:, 0]
    lo = np.asarray(padded.x_lo)
    hi = np.asarray(padded.x_hi)
    x = lo + (hi - lo) * u[:, 1:d + 1]
    amp = spec.amplitude.sample(u[:, d + 1])
    rt_lo, rt_hi = _as_range(spec.r_t, "environment.r_t")
    rx_lo, rx_hi = _as_range(spec.r_x, "environment.r_x")
    rt = rt_lo + (rt_hi - rt_lo) * u[:, d + 2]
    rx = rx_lo + (rx_hi - rx_lo) * u[:, d + 3]
    return PoissonCloud(t, x, amp, rt, rx, window, spec)


def shear_cloud(cloud: PoissonCloud, v) -> PoissonCloud:
    """Push the points forward under (t, x) -> (t, x + t v); marks unchanged."""
    v = np.asarray(v, dtype=float).reshape(cloud.d)
    return PoissonCloud(cloud.t, cloud.x + cloud.t[:, None] * v, cloud.amp, cloud.rt,
                        cloud.rx, cloud.box, cloud.spec, shear=cloud.shear + v)


def _single(out, key, t):
    value = out[key]
    return value[0] if np.ndim(t) == 0 else value


def _queries(t, x, d):
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    x_arr = np.asarray(x, dtype=float).reshape(len(t_arr), d)
    return t_arr, x_arr


def eval_F(cloud, t, x):
    """F(t, x); scalar query in, scalar out, batched queries in, array out."""
    tt, xx = _queries(t, x, cloud.d)
    return _single(cloud.evaluate(tt, xx, want=("F",)), "F", t)


def eval_gradF(cloud, t, x):
    tt, xx = _queries(t, x, cloud.d)
    return _single(cloud.evaluate(tt, xx, want=("grad",)), "grad", t)


def eval_hessF(cloud, t, x):
    tt, xx = _queries(t, x, cloud.d)
    return _single(cloud.evaluate(tt, xx, want=("hess",)), "hess", t)


def eval_Theta(cloud, t, x):
    """Theta(t, x) = sum_i (t - t_i) grad phi_i(t - t_i, x - x_i)."""
    tt, xx = _queries(t, x, cloud.d)
    return _single(cloud.evaluate(tt, xx, want=("theta",)), "theta", t)


def eval_F_sheared(cloud, v, t, x):
    tt, xx = _queries(t, x, cloud.d)
    return _single(cloud.evaluate(tt, xx, v=v, want=("F",)), "F", t)


# ---------------------------------------------------------------------------
# serialization


def cloud_to_dict(cloud: PoissonCloud) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "spec": cloud.spec.to_dict(),
        "window": {"t": [cloud.box.t_lo, cloud.box.t_hi],
                   "x_lo": list(cloud.box.x_lo), "x_hi": list(cloud.box.x_hi)},
        "shear": cloud.shear.tolist(),
        "points": [[float(t), x.tolist(), float(a), float(rt), float(rx)]
                   for t, x, a, rt, rx in zip(cloud.t, cloud.x, cloud.amp, cloud.rt, cloud.rx)],
    }


def cloud_from_dict(data: dict) -> PoissonCloud:
    if data.get("format_version") != FORMAT_VERSION:
        raise ValidationError("format_version", f"unsupported cloud format {data.get('format_version')!r}")
    spec = EnvironmentSpec.from_dict(data["spec"])
    win = data["window"]
    box = Box(win["t"][0], win["t"][1], tuple(win["x_lo"]), tuple(win["x_hi"]))
    pts = data["points"]
    d = spec.d
    t = np.array([p[0] for p in pts], dtype=float)
    x = np.array([p[1] for p in pts], dtype=float).reshape(len(pts), d)
    cols = np.array([p[2:] for p in pts], dtype=float).reshape(len(pts), 3)
    return PoissonCloud(t, x, cols[:, 0], cols[:, 1], cols[:, 2], box, spec, shear=data.get("shear"))


def save_cloud(cloud: PoissonCloud, path) -> None:
    with open(path, "w") as fh:
        json.dump(cloud_to_dict(cloud), fh)


def load_cloud(path) -> PoissonCloud:
    with open(path) as fh:
        return cloud_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# statistical audits (report only)


def _box_sup_abs_F(cloud, t0, x0, side, density):
    axes = [np.linspace(t0, t0 + side, density)] + \
           [np.linspace(c, c + side, density) for c in np.atleast_1d(x0)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return float(np.max(np.abs(cloud.evaluate(pts[:, 0], pts[:, 1:], want=("F",))["F"])))


def moment_audit(spec: EnvironmentSpec, lambdas: Sequence[float] = (0.1, 0.25, 0.5, 1.0),
                 sample_sizes: Sequence[int] = (50, 100, 200), density: int = 9) -> dict:
    """Empirical MGF of the sup of |F| over unit boxes.

    One unit box per seed (seeds ``spec.seed + k``); the MGF estimate is
    reported for nested sample prefixes.  ``stable_lambda`` is the largest
    lambda whose estimates across prefixes stay within 25% of the full-sample
    value.
    """
    n_max = max(sample_sizes)
    box = Box(0.0, 1.0, (0.0,) * spec.d, (1.0,) * spec.d)
    sups = []
    for k in range(n_max):
        cloud = sample_environment(spec.with_seed(spec.seed + k), box)
        sups.append(_box_sup_abs_F(cloud, 0.0, np.zeros(spec.d), 1.0, density))
    sups = np.asarray(sups)
    table = {}
    stable = None
    for lam in lambdas:
        ests = [float(np.mean(np.exp(lam * sups[:n]))) for n in sample_sizes]
        table[lam] = ests
        full = ests[-1]
        if np.isfinite(full) and all(abs(e - full) <= 0.25 * full for e in ests):
            stable = lam
    return {"sample_sizes": list(sample_sizes), "mgf": {str(k): v for k, v in table.items()},
            "stable_lambda": stable, "box_sups": sups.tolist()}


def linear_growth_audit(spec: EnvironmentSpec, T: float = 1.0,
                        ranges: Sequence[float] = (4.0, 8.0, 16.0, 32.0), density: int = 5) -> dict:
    """Track max over |x| <= R of sup_{s in [0, T]} |F(s, x)| / (|x| + 1) as R grows (d = 1 sweep
    along the first axis, other coordinates at 0)."""
    r_max = max(ranges)
    x_lo = (-r_max,) + (-1.0,) * (spec.d - 1)
    x_hi = (r_max,) + (1.0,) * (spec.d - 1)
    cloud = sample_environment(spec, Box(0.0, T, x_lo, x_hi))
    ts = np.linspace(0.0, T, density)
    xs = np.arange(-r_max, r_max + 1e-12, 0.25)
    tt, xg = np.meshgrid(ts, xs, indexing="ij")
    pts = np.zeros((tt.size, spec.d))
    pts[:, 0] = xg.ravel()
    vals = np.abs(cloud.evaluate(tt.ravel(), pts, want=("F",))["F"]).reshape(tt.shape)
    sup_t = vals.max(axis=0)
    ratio = sup_t / (np.abs(xs) + 1.0)
    series = [float(ratio[np.abs(xs) <= r].max()) for r in ranges]
    return {"ranges": list(ranges), "max_ratio": series,
            "stabilized": bool(series[-1] <= 1.5 * series[len(series) // 2] + 1e-12)}
