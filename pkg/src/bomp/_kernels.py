"""Compiled inner loops for collision evaluation against height-map grids.

These mirror the reference implementations in geom/robot/heightmap but run
the (sample x capsule x cell) loops in nopython mode. The environment is
exploited as a grid of vertical capsules: a cheap xy lower bound prunes the
exact segment-segment evaluations, so the returned minima are still exact.
All functions release the GIL so Jacobian workers can run in threads.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .robot import NDOF


@njit(cache=True, nogil=True)
def _fk_arrays(dh, tool_t, q):
    """Flange and tip transforms plus joint origins/axes (joint i rotates
    about axes[i] through origins[i])."""
    T = np.eye(4)
    origins = np.zeros((NDOF + 1, 3))
    axes = np.zeros((NDOF + 1, 3))
    axes[0, 2] = 1.0
    A = np.empty((4, 4))
    for i in range(NDOF):
        a = dh[i, 0]
        d = dh[i, 1]
        alpha = dh[i, 2]
        ct, st = np.cos(q[i]), np.sin(q[i])
        ca, sa = np.cos(alpha), np.sin(alpha)
        A[0, 0], A[0, 1], A[0, 2], A[0, 3] = ct, -st * ca, st * sa, a * ct
        A[1, 0], A[1, 1], A[1, 2], A[1, 3] = st, ct * ca, -ct * sa, a * st
        A[2, 0], A[2, 1], A[2, 2], A[2, 3] = 0.0, sa, ca, d
        A[3, 0], A[3, 1], A[3, 2], A[3, 3] = 0.0, 0.0, 0.0, 1.0
        T = T @ A
        origins[i + 1] = T[:3, 3]
        axes[i + 1] = T[:3, 2]
    tip = T @ tool_t
    return T, tip, origins, axes


@njit(cache=True, nogil=True)
def _point_speed(origins, axes, qd, p):
    """Linear speed of a point rigidly attached past the last joint."""
    vx = vy = vz = 0.0
    for i in range(NDOF):
        rx = p[0] - origins[i, 0]
        ry = p[1] - origins[i, 1]
        rz = p[2] - origins[i, 2]
        vx += qd[i] * (axes[i, 1] * rz - axes[i, 2] * ry)
        vy += qd[i] * (axes[i, 2] * rx - axes[i, 0] * rz)
        vz += qd[i] * (axes[i, 0] * ry - axes[i, 1] * rx)
    return np.sqrt(vx * vx + vy * vy + vz * vz)


@njit(cache=True, nogil=True)
def _seg_vseg_dist(p0, p1, cx, cy, zlo, zhi):
    """Distance between segment p0-p1 and the vertical segment at (cx, cy)
    spanning [zlo, zhi]; also returns the parameter on the first segment."""
    d1x = p1[0] - p0[0]
    d1y = p1[1] - p0[1]
    d1z = p1[2] - p0[2]
    d2z = zhi - zlo
    rx = p0[0] - cx
    ry = p0[1] - cy
    rz = p0[2] - zlo
    a = d1x * d1x + d1y * d1y + d1z * d1z
    e = d2z * d2z
    f = d2z * rz
    if a <= 1e-18 and e <= 1e-18:
        return np.sqrt(rx * rx + ry * ry + rz * rz), 0.0
    if a <= 1e-18:
        s = 0.0
        t = min(max(f / e, 0.0), 1.0)
    else:
        c = d1x * rx + d1y * ry + d1z * rz
        if e <= 1e-18:
            t = 0.0
            s = min(max(-c / a, 0.0), 1.0)
        else:
            b = d1z * d2z
            denom = a * e - b * b
            if denom > 1e-18:
                s = min(max((b * f - c * e) / denom, 0.0), 1.0)
            else:
                s = 0.0
            t = b * s + f
            if t < 0.0:
                t = 0.0
                s = min(max(-c / a, 0.0), 1.0)
            elif t > e:
                t = 1.0
                s = min(max((b - c) / a, 0.0), 1.0)
            else:
                t = t / e
    gx = rx + s * d1x
    gy = ry + s * d1y
    gz = rz + s * d1z - t * d2z
    return np.sqrt(gx * gx + gy * gy + gz * gz), s


@njit(cache=True, nogil=True)
def _point_seg_dist_xy(px, py, ax, ay, bx, by):
    dx = bx - ax
    dy = by - ay
    denom = dx * dx + dy * dy
    if denom <= 1e-18:
        s = 0.0
    else:
        s = min(max(((px - ax) * dx + (py - ay) * dy) / denom, 0.0), 1.0)
    ex = px - (ax + s * dx)
    ey = py - (ay + s * dy)
    return np.sqrt(ex * ex + ey * ey)


@njit(cache=True, nogil=True)
def _vertical_escape_grid(p0, p1, rsum, cx, cy, zlo, zhi, z_max, tol):
    """Minimal upward shift separating the capsule pair (env vertical)."""
    d0, _ = _seg_vseg_dist(p0, p1, cx, cy, zlo, zhi)
    if d0 >= rsum:
        return 0.0
    lo = 0.0
    hi = z_max
    a = np.empty(3)
    b = np.empty(3)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        a[0], a[1], a[2] = p0[0], p0[1], p0[2] + mid
        b[0], b[1], b[2] = p1[0], p1[1], p1[2] + mid
        d, _ = _seg_vseg_dist(a, b, cx, cy, zlo, zhi)
        if d >= rsum:
            hi = mid
        else:
            lo = mid
    return hi


@njit(cache=True, nogil=True)
def _capsule_vs_grid(p0, p1, r, heights, cell, ox, oy, z0, cell_r,
                     origins, axes, qd, with_pen):
    """Exact min clearance of one robot capsule against every cell capsule,
    plus the speed-scaled penetration sum when with_pen is set.

    A cell's clearance is lower-bounded by its xy distance minus the radii,
    so exact evaluation only runs where that bound undercuts the running
    minimum (or zero, to catch every penetration).
    """
    h, w = heights.shape
    best = np.inf
    pen = 0.0
    rsum = r + cell_r
    for i in range(h):
        cy = oy + (i + 0.5) * cell
        for j in range(w):
            cx = ox + (j + 0.5) * cell
            lb = _point_seg_dist_xy(cx, cy, p0[0], p0[1], p1[0], p1[1]) - rsum
            if lb >= best and (not with_pen or lb >= 0.0):
                continue
            d, s = _seg_vseg_dist(p0, p1, cx, cy, z0, heights[i, j])
            clear = d - rsum
            if clear < best:
                best = clear
            if with_pen and clear < 0.0:
                if d < cell_r:
                    # robot axis inside the cell capsule: use the escape lift
                    mag = _vertical_escape_grid(p0, p1, rsum, cx, cy, z0,
                                                heights[i, j], 2.0, 1e-9)
                else:
                    mag = -clear
                px = p0[0] + s * (p1[0] - p0[0])
                py = p0[1] + s * (p1[1] - p0[1])
                pz = p0[2] + s * (p1[2] - p0[2])
                pt = np.empty(3)
                pt[0], pt[1], pt[2] = px, py, pz
                speed = _point_speed(origins, axes, qd, pt)
                pen += mag * (1.0 + speed)
    return best, pen


@njit(cache=True, nogil=True)
def _config_capsules(dh, tool_t, tool_p0, tool_p1, tool_r, box_p0, box_p1,
                     box_r, has_box, q, inflate):
    """World-frame robot capsule endpoints/radii at configuration q."""
    flange, tip, origins, axes = _fk_arrays(dh, tool_t, q)
    m = tool_p0.shape[0]
    n = m + (1 if has_box else 0)
    P0 = np.empty((n, 3))
    P1 = np.empty((n, 3))
    R = np.empty(n)
    for k in range(m):
        P0[k] = flange[:3, :3] @ tool_p0[k] + flange[:3, 3]
        P1[k] = flange[:3, :3] @ tool_p1[k] + flange[:3, 3]
        R[k] = tool_r[k] + inflate
    if has_box:
        P0[m] = tip[:3, :3] @ box_p0 + tip[:3, 3]
        P1[m] = tip[:3, :3] @ box_p1 + tip[:3, 3]
        R[m] = box_r + inflate
    return P0, P1, R, origins, axes


@njit(cache=True, nogil=True)
def config_eval(dh, tool_t, tool_p0, tool_p1, tool_r, box_p0, box_p1, box_r,
                has_box, q, qd, heights, cell, ox, oy, z0, cell_r, inflate,
                with_pen):
    """(min clearance, speed-scaled penetration sum) at one configuration."""
    P0, P1, R, origins, axes = _config_capsules(
        dh, tool_t, tool_p0, tool_p1, tool_r, box_p0, box_p1, box_r, has_box,
        q, inflate)
    best = np.inf
    pen = 0.0
    for k in range(P0.shape[0]):
        b, p = _capsule_vs_grid(P0[k], P1[k], R[k], heights, cell, ox, oy,
                                z0, cell_r, origins, axes, qd, with_pen)
        if b < best:
            best = b
        pen += p
    return best, pen


@njit(cache=True, nogil=True)
def clearance_batch(dh, tool_t, tool_p0, tool_p1, tool_r, box_p0, box_p1,
                    box_r, has_box, Q, heights, cell, ox, oy, z0, cell_r,
                    inflate):
    """Min clearance per configuration for an (N, 6) batch."""
    n = Q.shape[0]
    out = np.empty(n)
    qd = np.zeros(NDOF)
    for k in range(n):
        best, _ = config_eval(dh, tool_t, tool_p0, tool_p1, tool_r, box_p0,
                              box_p1, box_r, has_box, Q[k], qd, heights,
                              cell, ox, oy, z0, cell_r, inflate, False)
        out[k] = best
    return out


@njit(cache=True, nogil=True)
def _hermite(q0, qd0, q1, qd1, t_step, u):
    """Cubic Hermite position/velocity at normalized parameter u in [0,1]."""
    h00 = (1.0 + 2.0 * u) * (1.0 - u) * (1.0 - u)
    h10 = u * (1.0 - u) * (1.0 - u)
    h01 = u * u * (3.0 - 2.0 * u)
    h11 = u * u * (u - 1.0)
    g00 = 6.0 * u * (u - 1.0)
    g10 = (1.0 - u) * (1.0 - 3.0 * u)
    g01 = 6.0 * u * (1.0 - u)
    g11 = u * (3.0 * u - 2.0)
    q = np.empty(NDOF)
    qd = np.empty(NDOF)
    for i in range(NDOF):
        q[i] = (h00 * q0[i] + h01 * q1[i]
                + t_step * (h10 * qd0[i] + h11 * qd1[i]))
        qd[i] = (g00 * q0[i] + g01 * q1[i]) / t_step + g10 * qd0[i] + g11 * qd1[i]
    return q, qd


@njit(cache=True, nogil=True)
def segment_eval(dh, tool_t, tool_p0, tool_p1, tool_r, box_p0, box_p1, box_r,
                 has_box, q0, qd0, q1, qd1, t_step, n_samples, heights, cell,
                 ox, oy, z0, cell_r, inflate):
    """Aggregate collision value over uniform samples on one segment.

    Returns (D, min clearance, per-sample min clearance): D averages the
    speed-scaled penetration depths (negative) over the samples when any
    sample penetrates, so its scale does not depend on the sampling
    density; otherwise it is the smallest positive clearance.
    """
    total_pen = 0.0
    min_clear = np.inf
    d = np.empty(n_samples)
    for k in range(n_samples):
        u = k / (n_samples - 1.0) if n_samples > 1 else 0.0
        q, qd = _hermite(q0, qd0, q1, qd1, t_step, u)
        best, pen = config_eval(dh, tool_t, tool_p0, tool_p1, tool_r, box_p0,
                                box_p1, box_r, has_box, q, qd, heights, cell,
                                ox, oy, z0, cell_r, inflate, True)
        d[k] = best
        if best < min_clear:
            min_clear = best
        total_pen += pen
    if total_pen > 0.0:
        return -total_pen / n_samples, min_clear, d
    return min_clear, min_clear, d


def pack_tool(model):
    """Flatten the model's tool capsules into kernel-ready arrays."""
    p0 = np.array([c.p0 for c in model.tool_capsules], dtype=float)
    p1 = np.array([c.p1 for c in model.tool_capsules], dtype=float)
    r = np.array([c.radius for c in model.tool_capsules], dtype=float)
    return p0, p1, r


def pack_box(grasped_box):
    """Grasped-box capsule arrays; a placeholder is returned when absent."""
    if grasped_box is None:
        return np.zeros(3), np.zeros(3), 0.0, False
    c = grasped_box.capsule
    return (np.asarray(c.p0, dtype=float), np.asarray(c.p1, dtype=float),
            float(c.radius), True)


def pack_heightmap(hm):
    """Grid arrays and scalars for the kernel signatures."""
    return (np.ascontiguousarray(hm.heights), hm.cell_size,
            float(hm.origin[0]), float(hm.origin[1]), hm.z0,
            hm.capsule_radius)
