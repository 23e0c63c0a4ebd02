"""Radial kinetic energies L(v) = sum_k a_k |v|^k and their convex duals."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .environment import ValidationError


@dataclass(frozen=True)
class KineticEnergy:
    """Radial polynomial kinetic energy.

    ``coeffs[k]`` multiplies ``|v|_2^k``.  ``quadratic(scale)`` is
    ``scale * |v|^2 / 2``.
    """

    coeffs: tuple
    kind: str = "polynomial_norm"

    def __post_init__(self):
        object.__setattr__(self, "coeffs", tuple(float(c) for c in self.coeffs))

    @classmethod
    def quadratic(cls, scale: float = 1.0) -> "KineticEnergy":
        return cls((0.0, 0.0, 0.5 * float(scale)), kind="quadratic").validate()

    @classmethod
    def polynomial(cls, coeffs: Sequence[float]) -> "KineticEnergy":
        return cls(tuple(coeffs)).validate()

    @property
    def degree(self) -> int:
        nz = [k for k, a in enumerate(self.coeffs) if a != 0.0]
        return nz[-1] if nz else 0

    def validate(self) -> "KineticEnergy":
        a = self.coeffs
        if self.kind not in ("quadratic", "polynomial_norm"):
            raise ValidationError("kinetic.kind", f"unknown kind {self.kind!r}")
        if not all(np.isfinite(a)):
            raise ValidationError("kinetic.coeffs", "coefficients must be finite")
        p = self.degree
        if p < 2 or a[p] <= 0:
            raise ValidationError("kinetic.coeffs", "leading power must be >= 2 with a positive "
                                  "coefficient (superlinear growth)")
        if any(c < 0 for c in a[:p]):
            raise ValidationError("kinetic.coeffs", "lower coefficients must be >= 0")
        if len(a) > 1 and a[1] != 0.0:
            raise ValidationError("kinetic.coeffs", "a_1 |v| is not differentiable at v = 0")
        return self

    def to_dict(self) -> dict:
        if self.kind == "quadratic":
            return {"kind": "quadratic", "scale": 2.0 * self.coeffs[2]}
        return {"kind": "polynomial_norm", "coeffs": list(self.coeffs)}

    @classmethod
    def from_dict(cls, data: dict) -> "KineticEnergy":
        kind = data.get("kind")
        if kind == "quadratic":
            return cls.quadratic(float(data.get("scale", 1.0)))
        if kind == "polynomial_norm":
            return cls.polynomial(data.get("coeffs", ()))
        raise ValidationError("kinetic.kind", f"unknown kind {kind!r}")

    # radial profile ell(r) and its derivatives

    def radial(self, r, order: int = 0):
        r = np.asarray(r, dtype=float)
        out = np.zeros_like(r)
        for k, a in enumerate(self.coeffs):
            if a == 0.0 or k < order:
                continue
            fall = 1.0
            for j in range(order):
                fall *= k - j
            out = out + a * fall * _ipow(r, k - order)
        return out

    def __call__(self, v):
        return eval_L(self, v)


def _ipow(r, n: int):
    # repeated products keep array and scalar evaluations bit-identical
    out = np.ones_like(r)
    for _ in range(n):
        out = out * r
    return out


def _norms(v):
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        v = v.reshape(1)
    return v, np.sqrt(np.sum(v * v, axis=-1))


def eval_L(L: KineticEnergy, v):
    """L(v) for v of shape (..., d)."""
    _, r = _norms(v)
    return L.radial(r)


def grad_L(L: KineticEnergy, v):
    """grad L(v) = ell'(r) v / r, with value 0 at the origin."""
    v, r = _norms(v)
    d1 = L.radial(r, 1)
    safe = np.where(r > 0, r, 1.0)
    return np.where((r > 0)[..., None], (d1 / safe)[..., None] * v, 0.0)


def hess_L(L: KineticEnergy, v):
    """Hessian ell''(r) nn^T + ell'(r)/r (I - nn^T); at the origin 2 a_2 I."""
    v, r = _norms(v)
    d = v.shape[-1]
    d1 = L.radial(r, 1)
    d2 = L.radial(r, 2)
    safe = np.where(r > 0, r, 1.0)
    n = v / safe[..., None]
    nn = n[..., :, None] * n[..., None, :]
    eye = np.eye(d)
    tang = np.where(r > 0, d1 / safe, d2)
    return d2[..., None, None] * nn + tang[..., None, None] * (eye - nn)


def hess_norm_radial(L: KineticEnergy, r):
    """Operator norm of the Hessian at radius r: max(|ell''|, |ell'/r|)."""
    r = np.asarray(r, dtype=float)
    d2 = np.abs(L.radial(r, 2))
    safe = np.where(r > 0, r, 1.0)
    tang = np.where(r > 0, np.abs(L.radial(r, 1) / safe), d2)
    return np.maximum(d2, tang)


def sup_hess_norm(L: KineticEnergy, v, delta0: float):
    """sup over |r| <= delta0 of ||hess L(v + r)||, evaluated at radius |v| + delta0.

    For the admitted family (nonnegative coefficients, no linear term) the
    Hessian norm is ell'' and is nondecreasing in the radius.
    """
    _, r = _norms(v)
    return hess_norm_radial(L, r + delta0)


def check_assumptions(L: KineticEnergy, delta0: float = 0.5,
                      probe_radii: Sequence[float] = (1, 2, 4, 8, 16, 32, 64)) -> dict:
    """Probe the growth condition on the Hessian at increasing radii."""
    L.validate()
    if not 0 < delta0 < 1:
        raise ValidationError("kinetic.delta0", "must lie in (0, 1)")
    radii = np.asarray(probe_radii, dtype=float)
    if np.any(np.diff(radii) <= 0) or np.any(radii <= 0):
        raise ValidationError("kinetic.probe_radii", "must be positive and increasing")
    ratios = hess_norm_radial(L, radii + delta0) / L.radial(radii)
    tail = ratios[len(ratios) // 2:]
    diverging = bool(np.all(np.diff(tail) > 0) and tail[-1] > 10 * ratios[0])
    return {"delta0": delta0, "radii": radii.tolist(), "ratios": ratios.tolist(),
            "nonincreasing_tail": bool(np.all(np.diff(tail) <= 1e-12)),
            "violation": diverging}


def legendre(L: KineticEnergy, p, tol: float = 1e-10, max_iter: int = 200):
    """H(p) = sup_x <p, x> - L(x).

    Radial reduction: H(p) = sup_{r >= 0} r |p| - ell(r); the maximizer solves
    ell'(r) = |p|, found by Newton steps safeguarded by a bisection bracket.
    Accepts p of shape (d,) or (n, d).
    """
    p = np.asarray(p, dtype=float)
    scalar = p.ndim <= 1
    p2 = p.reshape(-1, p.shape[-1] if p.ndim else 1)
    s = np.sqrt(np.sum(p2 * p2, axis=1))
    r = _radial_argmax(L, s, tol, max_iter)
    h = r * s - L.radial(r)
    return float(h[0]) if scalar else h


def _radial_argmax(L, s, tol, max_iter):
    s = np.asarray(s, dtype=float)
    lo = np.zeros_like(s)
    hi = np.ones_like(s)
    while True:
        short = L.radial(hi, 1) < s
        if not short.any():
            break
        hi = np.where(short, 2.0 * hi, hi)
    zero = L.radial(lo, 1) >= s
    r = 0.5 * (lo + hi)
    for _ in range(max_iter):
        f = L.radial(r, 1) - s
        lo = np.where(f < 0, r, lo)
        hi = np.where(f >= 0, r, hi)
        fp = L.radial(r, 2)
        newton = r - f / np.where(fp > 0, fp, 1.0)
        ok = (fp > 0) & (newton > lo) & (newton < hi)
        r_new = np.where(ok, newton, 0.5 * (lo + hi))
        if np.all(np.abs(r_new - r) <= tol * (1.0 + r)):
            r = r_new
            break
        r = r_new
    return np.where(zero, 0.0, r)


def discrete_legendre(samples, p) -> float:
    """max over samples (v, Lambda(v)) of <p, v> - Lambda(v); a lower bound for the dual."""
    samples = list(samples)
    if not samples:
        raise ValueError("discrete_legendre needs at least one sample")
    p = np.atleast_1d(np.asarray(p, dtype=float))
    return float(max(float(np.dot(p, np.atleast_1d(v))) - float(lam) for v, lam in samples))
