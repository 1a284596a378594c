"""Capsule primitives and distance queries.

Capsules (swept spheres over a line segment) are the only collision
primitive: vertical capsules model the height-map environment, a small
set of capsules models the suction tool and the grasped box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_PARALLEL_EPS = 1e-12


@dataclass(frozen=True)
class Capsule:
    """Line segment from p0 to p1 swept by a sphere of the given radius."""

    p0: np.ndarray
    p1: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "p0", np.asarray(self.p0, dtype=float))
        object.__setattr__(self, "p1", np.asarray(self.p1, dtype=float))
        if not self.radius > 0.0:
            raise ValueError("capsule radius must be positive")

    def inflate(self, margin):
        return Capsule(self.p0, self.p1, self.radius + margin)

    def transformed(self, pose):
        """Apply a 4x4 rigid transform to both endpoints."""
        R, t = pose[:3, :3], pose[:3, 3]
        return Capsule(R @ self.p0 + t, R @ self.p1 + t, self.radius)


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", np.asarray(self.min, dtype=float))
        object.__setattr__(self, "max", np.asarray(self.max, dtype=float))
        if np.any(self.min > self.max):
            raise ValueError("aabb min must be <= max componentwise")


def segment_closest_params(p0, p1, q0, q1):
    """Clamped closest-point parameters (s, t) between segments p and q.

    Parallel segments are resolved by clamping s first (tie-break s from 0)
    and re-projecting t, which keeps the solution well-conditioned.
    """
    u = p1 - p0
    v = q1 - q0
    w = p0 - q0
    a = float(u @ u)
    b = float(u @ v)
    c = float(v @ v)
    d = float(u @ w)
    e = float(v @ w)
    denom = a * c - b * b

    if denom > _PARALLEL_EPS * max(a * c, 1e-30):
        s = np.clip((b * e - c * d) / denom, 0.0, 1.0)
    else:
        s = 0.0
    # closest t on q for fixed s, then re-project s for the clamped t
    t = (b * s + e) / c if c > 0.0 else 0.0
    t = np.clip(t, 0.0, 1.0)
    s = (b * t - d) / a if a > 0.0 else 0.0
    s = np.clip(s, 0.0, 1.0)
    return float(s), float(t)


def segment_distance(p0, p1, q0, q1):
    s, t = segment_closest_params(
        np.asarray(p0, float), np.asarray(p1, float),
        np.asarray(q0, float), np.asarray(q1, float))
    cp = p0 + s * (np.asarray(p1, float) - p0)
    cq = q0 + t * (np.asarray(q1, float) - q0)
    return float(np.linalg.norm(cp - cq))


def capsule_clearance(a: Capsule, b: Capsule) -> float:
    """Signed clearance: segment-segment distance minus summed radii.

    Negative iff the capsules penetrate; the magnitude is then the minimum
    translation distance in any direction. Arguments are ordered by a
    deterministic key first so the result is bitwise symmetric.
    """
    ka = (tuple(a.p0), tuple(a.p1))
    kb = (tuple(b.p0), tuple(b.p1))
    if kb < ka:
        a, b = b, a
    return segment_distance(a.p0, a.p1, b.p0, b.p1) - (a.radius + b.radius)


def capsule_aabb(c: Capsule) -> Aabb:
    lo = np.minimum(c.p0, c.p1) - c.radius
    hi = np.maximum(c.p0, c.p1) + c.radius
    return Aabb(lo, hi)


def _clearance_lifted(r: Capsule, e: Capsule, dz):
    p0 = r.p0 + np.array([0.0, 0.0, dz])
    p1 = r.p1 + np.array([0.0, 0.0, dz])
    return segment_distance(p0, p1, e.p0, e.p1) - (r.radius + e.radius)


def vertical_escape(r: Capsule, e: Capsule, tol=1e-6, z_max=2.0) -> float:
    """Minimum upward translation of r that separates it from e.

    e is expected to be a vertically-oriented environment capsule; solved in
    closed form for that case, by bisection otherwise. Returns 0 when the
    capsules are already separated.
    """
    if capsule_clearance(r, e) >= 0.0:
        return 0.0
    exy = e.p1[:2] - e.p0[:2]
    if np.dot(exy, exy) < 1e-18:
        best = _vertical_escape_closed_form(r, e)
        if _clearance_lifted(r, e, best) >= -1e-9:
            # refine downward in case a shorter lift already separates
            # (possible when r dips below e's bottom cap)
            lo, hi = 0.0, best
            while hi - lo > tol:
                mid = 0.5 * (lo + hi)
                if _clearance_lifted(r, e, mid) >= 0.0:
                    hi = mid
                else:
                    lo = mid
            return hi
    # general fallback: bisection on the lift distance
    lo, hi = 0.0, z_max
    if _clearance_lifted(r, e, hi) < 0.0:
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _clearance_lifted(r, e, mid) >= 0.0:
            hi = mid
        else:
            lo = mid
    return hi


def _vertical_escape_closed_form(r: Capsule, e: Capsule) -> float:
    """Exact lift for a vertical environment capsule.

    Every point p(s) of r's segment with xy-distance g(s) < rr from e's axis
    must end above the top cap sphere: pz(s) + dz >= ez_top + sqrt(rr^2 - g^2).
    The requirement f(s) is concave in s, so its maximum is at an endpoint,
    a domain boundary, or the single interior critical point.
    """
    rr = r.radius + e.radius
    ez_top = max(e.p0[2], e.p1[2])
    ex, ey = e.p0[0], e.p0[1]
    u = r.p1 - r.p0
    w0 = np.array([r.p0[0] - ex, r.p0[1] - ey])
    uxy = u[:2]
    # g(s) = |w0 + s*uxy|^2 = g0 + g1 s + g2 s^2
    g0 = float(w0 @ w0)
    g1 = 2.0 * float(w0 @ uxy)
    g2 = float(uxy @ uxy)

    def g(s):
        return g0 + g1 * s + g2 * s * s

    cands = [0.0, 1.0]
    # domain boundaries where g(s) = rr^2
    disc = g1 * g1 - 4.0 * g2 * (g0 - rr * rr)
    if g2 > 1e-18 and disc >= 0.0:
        sq = np.sqrt(disc)
        cands += [(-g1 - sq) / (2.0 * g2), (-g1 + sq) / (2.0 * g2)]
    # interior critical point: (g1 + 2 g2 s)^2 = 4 uz^2 (rr^2 - g(s))
    uz = u[2]
    a = 4.0 * g2 * g2 + 4.0 * uz * uz * g2
    b = 4.0 * g1 * g2 + 4.0 * uz * uz * g1
    c = g1 * g1 - 4.0 * uz * uz * (rr * rr - g0)
    if abs(a) > 1e-18:
        disc2 = b * b - 4.0 * a * c
        if disc2 >= 0.0:
            sq = np.sqrt(disc2)
            cands += [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)]
    elif abs(b) > 1e-18:
        cands.append(-c / b)

    best = 0.0
    for s in cands:
        s = min(max(s, 0.0), 1.0)
        gs = g(s)
        if gs >= rr * rr:
            continue
        f = ez_top + np.sqrt(rr * rr - gs) - (r.p0[2] + s * uz)
        best = max(best, f)
    return best
