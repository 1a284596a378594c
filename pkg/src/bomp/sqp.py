"""Jerk-minimizing trajectory optimizer over a height-map environment.

The solver stacks (q, qd, qdd) for H+1 waypoints, enforces constant-jerk
dynamics and boundary conditions as hard linear constraints, and handles
collisions through linearized soft constraints whose values and Jacobians
come from finite differences of the sampled segment clearance aggregate.
A small ADMM-based QP solver (operator splitting with a polish step) runs
the convex subproblems so iterates can be warm started across the loop and
across the binary search over the segment duration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import _kernels as K
from .robot import NDOF
from .trajectory import Trajectory, from_arrays

# ---------------------------------------------------------------------------
# convex QP subproblem: minimize 1/2 x'Px + q'x  s.t.  l <= Ax <= u


@dataclass
class QpProblem:
    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.P = sp.csc_matrix(self.P)
        self.A = sp.csc_matrix(self.A)
        self.q = np.asarray(self.q, dtype=float)
        self.l = np.asarray(self.l, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        n = self.q.shape[0]
        m = self.l.shape[0]
        if self.P.shape != (n, n) or self.A.shape != (m, n):
            raise ValueError("inconsistent QP dimensions")
        if self.u.shape[0] != m or np.any(self.l > self.u + 1e-12):
            raise ValueError("invalid constraint bounds")


@dataclass
class QpSolution:
    status: str                # solved | infeasible | dual_infeasible | not_converged
    x: np.ndarray | None
    y: np.ndarray | None
    objective: float
    iterations: int


def _ruiz_equilibrate(P, q, A, iters=10):
    """Symmetric scaling of the stacked KKT data (modified Ruiz)."""
    n, m = P.shape[0], A.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    c = 1.0
    Ps, qs, As = P.copy(), q.copy(), A.copy()
    for _ in range(iters):
        col_p = np.abs(Ps).max(axis=0).toarray().ravel()
        col_a = np.abs(As).max(axis=0).toarray().ravel()
        dn = np.sqrt(np.maximum(np.maximum(col_p, col_a), 1e-10))
        row_a = np.abs(As).max(axis=1).toarray().ravel()
        en = np.sqrt(np.maximum(row_a, 1e-10))
        Dn = sp.diags(1.0 / dn)
        En = sp.diags(1.0 / en)
        Ps = Dn @ Ps @ Dn
        As = En @ As @ Dn
        qs = qs / dn
        d /= dn
        e /= en
        # cost scaling keeps the quadratic and linear parts balanced;
        # zero columns of P (variables absent from the objective) are
        # excluded so the mean does not drag the scale toward zero
        col_max = np.abs(Ps).max(axis=0).toarray().ravel()
        nz = col_max[col_max > 0]
        gamma = max(nz.mean() if nz.size else 0.0,
                    np.linalg.norm(qs, np.inf), 1e-10)
        Ps = Ps / gamma
        qs = qs / gamma
        c /= gamma
    return Ps.tocsc(), qs, As.tocsc(), d, e, c


def _polish(P, q, A, l, u, x, y, z, eps=1e-9):
    """Re-solve on the active set for high-accuracy primal/dual values."""
    m = A.shape[0]
    act_l = (z - l < 1e-7) & (y < 1e-7)
    act_u = (u - z < 1e-7) & (y > -1e-7)
    active = act_l | act_u
    if not np.any(active):
        try:
            xp = np.linalg.solve(P.toarray() + eps * np.eye(P.shape[0]), -q)
        except np.linalg.LinAlgError:
            return None
        return xp, np.zeros(m)
    Aa = A[active]
    ba = np.where(act_u[active], u[active], l[active])
    n = P.shape[0]
    k = Aa.shape[0]
    kkt = np.zeros((n + k, n + k))
    kkt[:n, :n] = P.toarray() + eps * np.eye(n)
    kkt[:n, n:] = Aa.toarray().T
    kkt[n:, :n] = Aa.toarray()
    kkt[n:, n:] = -eps * np.eye(k)
    rhs = np.concatenate([-q, ba])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        return None
    xp = sol[:n]
    yp = np.zeros(m)
    yp[active] = sol[n:]
    return xp, yp


def _residuals(P, q, A, l, u, x, y):
    ax = A @ x
    r_prim = float(np.max(np.abs(ax - np.clip(ax, l, u)))) if len(l) else 0.0
    r_dual = float(np.max(np.abs(P @ x + q + A.T @ y)))
    return r_prim, r_dual


def qp_solve(prob: QpProblem, tol=1e-6, max_iter=20000, x0=None, y0=None,
             rel_tol=0.0):
    """Operator-splitting QP solve with polish and infeasibility certificates.

    Termination uses eps = tol + rel_tol * scale per residual (rel_tol=0
    keeps the plain absolute test); the active-set polish afterwards
    usually tightens the returned point well past the loop tolerance.
    """
    P, q, A, l, u = prob.P, prob.q, prob.A, prob.l, prob.u
    n, m = P.shape[0], A.shape[0]
    if m == 0:
        A = sp.csc_matrix((1, n))
        l = np.array([-np.inf])
        u = np.array([np.inf])
        m = 1
    Ps, qs, As, d, e, c = _ruiz_equilibrate(P, q, A)
    ls = e * l
    us = e * u
    AT = sp.csr_matrix(A.T)
    AsT = sp.csr_matrix(As.T)
    q_inf = float(np.linalg.norm(q, np.inf)) if q.size else 0.0

    sigma = 1e-6
    alpha = 1.6
    eq = (us - ls) < 1e-12
    base_rho = 0.1

    def factor(base):
        rho = np.where(eq, 1e3 * base, base)
        kkt = sp.bmat([[Ps + sigma * sp.eye(n), As.T],
                       [As, -sp.diags(1.0 / rho)]], format="csc")
        return rho, splu(kkt)

    rho, lu = factor(base_rho)

    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float) / d
    y = np.zeros(m) if y0 is None else c * (np.asarray(y0, dtype=float) / e)
    z = np.clip(As @ x, ls, us)

    status = "not_converged"
    it = 0
    for it in range(1, max_iter + 1):
        x_prev, y_prev = x, y
        rhs = np.concatenate([sigma * x - qs, z - y / rho])
        sol = lu.solve(rhs)
        xt = sol[:n]
        nu = sol[n:]
        zt = z + (nu - y) / rho
        x = alpha * xt + (1.0 - alpha) * x
        zc = alpha * zt + (1.0 - alpha) * z + y / rho
        z_new = np.clip(zc, ls, us)
        y = rho * (zc - z_new)
        z = z_new

        if it % 25 == 0 or it == max_iter:
            # unscaled residuals
            xu = d * x
            yu = (e * y) / c
            ax_u = A @ xu
            px_u = P @ xu
            aty_u = AT @ yu
            r_prim = float(np.max(np.abs(ax_u - np.clip(ax_u, l, u)))) \
                if len(l) else 0.0
            r_dual = float(np.max(np.abs(px_u + q + aty_u)))
            eps_prim = tol + rel_tol * max(np.linalg.norm(ax_u, np.inf),
                                           np.linalg.norm(
                                               np.clip(ax_u, l, u), np.inf))
            eps_dual = tol + rel_tol * max(
                np.linalg.norm(px_u, np.inf),
                np.linalg.norm(aty_u, np.inf), q_inf)
            if r_prim <= eps_prim and r_dual <= eps_dual:
                status = "solved"
                break
            # adaptive step size on the scaled residual ratio
            ax_s = As @ x
            psx = Ps @ x
            asty = AsT @ y
            rp_s = np.linalg.norm(ax_s - z, np.inf)
            rd_s = np.linalg.norm(psx + qs + asty, np.inf)
            rp_rel = rp_s / max(np.linalg.norm(ax_s, np.inf),
                                np.linalg.norm(z, np.inf), 1e-12)
            rd_rel = rd_s / max(np.linalg.norm(psx, np.inf),
                                np.linalg.norm(asty, np.inf),
                                np.linalg.norm(qs, np.inf), 1e-12)
            scale = np.sqrt(rp_rel / max(rd_rel, 1e-16))
            if scale > 5.0 or scale < 0.2:
                base_rho = float(np.clip(base_rho * scale, 1e-6, 1e6))
                rho, lu = factor(base_rho)
            dy = y - y_prev
            dx = x - x_prev
            ndy = np.linalg.norm(dy, np.inf)
            ndx = np.linalg.norm(dx, np.inf)
            if ndy > 1e-14:
                # primal infeasibility: a separating dual direction
                dyu = (e * dy) / c
                sup = float(
                    np.sum(u[np.isfinite(u)] * np.maximum(dyu[np.isfinite(u)], 0))
                    + np.sum(l[np.isfinite(l)] * np.minimum(dyu[np.isfinite(l)], 0)))
                if (np.linalg.norm(AT @ dyu, np.inf)
                        <= 1e-5 * np.linalg.norm(dyu, np.inf)
                        and sup < -1e-8 * np.linalg.norm(dyu, np.inf)):
                    status = "infeasible"
                    break
            if ndx > 1e-14:
                dxu = d * dx
                adx = A @ dxu
                ok_dir = True
                fin_u = np.isfinite(u)
                fin_l = np.isfinite(l)
                if np.any(adx[fin_u] > 1e-5 * np.linalg.norm(dxu, np.inf)):
                    ok_dir = False
                if np.any(adx[fin_l] < -1e-5 * np.linalg.norm(dxu, np.inf)):
                    ok_dir = False
                if (ok_dir
                        and np.linalg.norm(P @ dxu, np.inf)
                        <= 1e-6 * np.linalg.norm(dxu, np.inf)
                        and q @ dxu < -1e-8 * np.linalg.norm(dxu, np.inf)):
                    status = "dual_infeasible"
                    break

    xu = d * x
    yu = (e * y) / c
    if status == "solved":
        z_u = np.clip(A @ xu, l, u)
        polished = _polish(P, q, A, l, u, xu, yu, z_u)
        if polished is not None:
            xp, yp = polished
            rp, rd = _residuals(P, q, A, l, u, xp, yp)
            rp0, rd0 = _residuals(P, q, A, l, u, xu, yu)
            if max(rp, rd) <= max(rp0, rd0):
                xu, yu = xp, yp
        obj = float(0.5 * xu @ (P @ xu) + q @ xu)
        return QpSolution("solved", xu, yu, obj, it)
    if status in ("infeasible", "dual_infeasible"):
        return QpSolution(status, None, None, np.inf, it)
    obj = float(0.5 * xu @ (P @ xu) + q @ xu)
    return QpSolution("not_converged", xu, yu, obj, it)


# ---------------------------------------------------------------------------
# nonlinear collision terms


@dataclass
class SqpParams:
    horizon: int = 16
    t_step: float = 0.16
    collision_weight: float = 1e4
    trust_radius: float = 0.2
    trust_shrink: float = 0.5
    trust_grow: float = 1.5
    trust_max: float = 1.0
    max_iterations: int = 50
    qp_tol: float = 1e-6
    qp_rel_tol: float = 1e-4
    samples_per_segment: int = 50
    inflation: float = 0.01
    acceptance_tol: float = 1e-6
    solver_margin: float = 0.003
    near_threshold: float = 0.02
    fd_step_q: float = 1e-4
    fd_step_qd: float = 1e-3
    weight_max: float = 1e7
    trust_min: float = 1e-4
    resolution: float = 0.005
    verify_samples: int = 500
    qp_max_iter: int = 10000
    stall_iterations: int = 6
    max_doublings: int = 2
    workers: int = 1

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if self.collision_weight <= 0 or self.samples_per_segment < 1:
            raise ValueError("weight must be positive and samples >= 1")

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.__dict__, f, indent=1)

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            return cls(**json.load(f))


@dataclass
class CollisionTerm:
    t: int
    value: float                  # aggregated D_t at the reference
    jac_q0: np.ndarray            # dD/dq_t
    jac_q1: np.ndarray            # dD/dq_{t+1}
    jac_qd0: np.ndarray           # dD/dqd_t
    jac_qd1: np.ndarray           # dD/dqd_{t+1}

    def __post_init__(self):
        for j in (self.jac_q0, self.jac_q1, self.jac_qd0, self.jac_qd1):
            if not np.all(np.isfinite(j)):
                raise ValueError("collision Jacobian has non-finite entries")


class CollisionWorld:
    """Packed kernel arguments for one (robot, box, height map) scene."""

    def __init__(self, model, grasped_box, hm):
        self.model = model
        self.box = grasped_box
        self.tool = K.pack_tool(model)
        self.box_arrays = K.pack_box(grasped_box)
        self.grid = K.pack_heightmap(hm)

    def segment(self, q0, qd0, q1, qd1, t_step, samples, inflate):
        return K.segment_eval(self.model.dh, self.model.tool_transform,
                              *self.tool, *self.box_arrays, q0, qd0, q1, qd1,
                              t_step, samples, *self.grid, inflate)

    def clearance(self, Q, inflate):
        return K.clearance_batch(self.model.dh, self.model.tool_transform,
                                 *self.tool, *self.box_arrays,
                                 np.ascontiguousarray(Q, dtype=float),
                                 *self.grid, inflate)


def segment_collision(traj: Trajectory, t, env, model, box, samples=50,
                      inflate=0.0):
    """Aggregated collision value D_t of segment t plus per-sample d."""
    world = env if isinstance(env, CollisionWorld) else CollisionWorld(
        model, box, env)
    a, b = traj.states[t], traj.states[t + 1]
    D, _, d = world.segment(a.q, a.qd, b.q, b.qd, traj.t_step, samples,
                            inflate)
    return D, d


def collision_jacobians(traj: Trajectory, t, env, model, box, samples=50,
                        inflate=0.0, h_q=1e-4, h_qd=1e-3) -> CollisionTerm:
    """Central finite differences of D_t over the 24 endpoint scalars."""
    world = env if isinstance(env, CollisionWorld) else CollisionWorld(
        model, box, env)
    a, b = traj.states[t], traj.states[t + 1]
    base = [a.q.copy(), b.q.copy(), a.qd.copy(), b.qd.copy()]
    t_step = traj.t_step

    def eval_d(vecs):
        D, _, _ = world.segment(vecs[0], vecs[2], vecs[1], vecs[3], t_step,
                                samples, inflate)
        return D

    value = eval_d(base)
    jacs = [np.zeros(NDOF) for _ in range(4)]
    if not np.isfinite(value):
        return CollisionTerm(t, value, jacs[0], jacs[1], jacs[2], jacs[3])
    for slot in range(4):
        h = h_q if slot < 2 else h_qd
        for i in range(NDOF):
            plus = [v.copy() for v in base]
            minus = [v.copy() for v in base]
            plus[slot][i] += h
            minus[slot][i] -= h
            jacs[slot][i] = (eval_d(plus) - eval_d(minus)) / (2.0 * h)
    return CollisionTerm(t, value, jacs[0], jacs[1], jacs[2], jacs[3])


# ---------------------------------------------------------------------------
# QP assembly over stacked waypoint states


def _var_layout(H):
    n_state = 3 * NDOF * (H + 1)
    return n_state


def _q_idx(t):
    return 3 * NDOF * t


def _qd_idx(t):
    return 3 * NDOF * t + NDOF


def _qdd_idx(t):
    return 3 * NDOF * t + 2 * NDOF


def build_qp(ref: Trajectory, t_step, start, goal, limits, collision_terms,
             trust_radius, weight) -> QpProblem:
    """Assemble the convex subproblem around the reference trajectory.

    Decision variables stack (q, qd, qdd) per waypoint followed by one
    nonnegative slack per collision row; jerk is the scaled acceleration
    difference, so the objective is a quadratic in the states alone.
    """
    H = ref.horizon
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    if start.shape != (NDOF,) or goal.shape != (NDOF,):
        raise ValueError("endpoint dimension mismatch")
    n_state = _var_layout(H)
    n_slack = len(collision_terms)
    n = n_state + n_slack
    T = t_step

    # objective: 1/2 sum_t ||(qdd_{t+1} - qdd_t)/T||^2
    rows, cols, vals = [], [], []
    for t in range(H):
        for i in range(NDOF):
            r = t * NDOF + i
            rows += [r, r]
            cols += [_qdd_idx(t) + i, _qdd_idx(t + 1) + i]
            vals += [-1.0 / T, 1.0 / T]
    B = sp.coo_matrix((vals, (rows, cols)), shape=(H * NDOF, n)).tocsc()
    P = (B.T @ B).tocsc()
    qlin = np.zeros(n)
    qlin[n_state:] = weight

    a_rows, a_cols, a_vals = [], [], []
    l_list, u_list = [], []
    r = 0

    def add_entry(row, col, val):
        a_rows.append(row)
        a_cols.append(col)
        a_vals.append(val)

    # dynamics (position and velocity rows per segment)
    for t in range(H):
        for i in range(NDOF):
            add_entry(r, _q_idx(t + 1) + i, 1.0)
            add_entry(r, _q_idx(t) + i, -1.0)
            add_entry(r, _qd_idx(t) + i, -T)
            add_entry(r, _qdd_idx(t) + i, -T * T / 3.0)
            add_entry(r, _qdd_idx(t + 1) + i, -T * T / 6.0)
            l_list.append(0.0)
            u_list.append(0.0)
            r += 1
        for i in range(NDOF):
            add_entry(r, _qd_idx(t + 1) + i, 1.0)
            add_entry(r, _qd_idx(t) + i, -1.0)
            add_entry(r, _qdd_idx(t) + i, -T / 2.0)
            add_entry(r, _qdd_idx(t + 1) + i, -T / 2.0)
            l_list.append(0.0)
            u_list.append(0.0)
            r += 1

    # boundary: endpoints pinned, zero boundary velocity and acceleration
    for idx, val in ((_q_idx(0), start), (_q_idx(H), goal),
                     (_qd_idx(0), np.zeros(NDOF)), (_qd_idx(H), np.zeros(NDOF)),
                     (_qdd_idx(0), np.zeros(NDOF)),
                     (_qdd_idx(H), np.zeros(NDOF))):
        for i in range(NDOF):
            add_entry(r, idx + i, 1.0)
            l_list.append(float(val[i]))
            u_list.append(float(val[i]))
            r += 1

    # actuation limits with the trust region folded into the position bounds
    q_ref = ref.positions()
    for t in range(H + 1):
        for i in range(NDOF):
            lo = max(limits.q_min[i], q_ref[t, i] - trust_radius)
            hi = min(limits.q_max[i], q_ref[t, i] + trust_radius)
            if lo > hi:
                lo = hi = 0.5 * (lo + hi)
            add_entry(r, _q_idx(t) + i, 1.0)
            l_list.append(lo)
            u_list.append(hi)
            r += 1
        for i in range(NDOF):
            add_entry(r, _qd_idx(t) + i, 1.0)
            l_list.append(-limits.v_max[i])
            u_list.append(limits.v_max[i])
            r += 1
        for i in range(NDOF):
            add_entry(r, _qdd_idx(t) + i, 1.0)
            l_list.append(-limits.a_max[i])
            u_list.append(limits.a_max[i])
            r += 1

    # jerk limits on the acceleration differences
    for t in range(H):
        for i in range(NDOF):
            add_entry(r, _qdd_idx(t + 1) + i, 1.0)
            add_entry(r, _qdd_idx(t) + i, -1.0)
            l_list.append(-limits.j_max[i] * T)
            u_list.append(limits.j_max[i] * T)
            r += 1

    # linearized collision rows with slack, then slack nonnegativity
    qd_ref = ref.velocities()
    for k, ct in enumerate(collision_terms):
        t = ct.t
        if t < 0 or t >= H:
            raise ValueError("collision term segment index out of range")
        lhs_ref = (ct.jac_q0 @ q_ref[t] + ct.jac_q1 @ q_ref[t + 1]
                   + ct.jac_qd0 @ qd_ref[t] + ct.jac_qd1 @ qd_ref[t + 1])
        for i in range(NDOF):
            add_entry(r, _q_idx(t) + i, ct.jac_q0[i])
            add_entry(r, _q_idx(t + 1) + i, ct.jac_q1[i])
            add_entry(r, _qd_idx(t) + i, ct.jac_qd0[i])
            add_entry(r, _qd_idx(t + 1) + i, ct.jac_qd1[i])
        add_entry(r, n_state + k, 1.0)
        l_list.append(lhs_ref - ct.value)
        u_list.append(np.inf)
        r += 1
    for k in range(n_slack):
        add_entry(r, n_state + k, 1.0)
        l_list.append(0.0)
        u_list.append(np.inf)
        r += 1

    A = sp.coo_matrix((a_vals, (a_rows, a_cols)), shape=(r, n)).tocsc()
    return QpProblem(P, qlin, A, np.array(l_list), np.array(u_list))


def _states_from_x(x, H, t_step):
    q = np.empty((H + 1, NDOF))
    qd = np.empty((H + 1, NDOF))
    qdd = np.empty((H + 1, NDOF))
    for t in range(H + 1):
        q[t] = x[_q_idx(t):_q_idx(t) + NDOF]
        qd[t] = x[_qd_idx(t):_qd_idx(t) + NDOF]
        qdd[t] = x[_qdd_idx(t):_qdd_idx(t) + NDOF]
    return from_arrays(q, qd, qdd, t_step)


def project_consistent(q, qd, qdd, t_step, start, goal) -> Trajectory:
    """Closest dynamically consistent trajectory to the given waypoint
    arrays, with pinned endpoints and zero boundary velocity/acceleration.

    Solved per joint as an equality-constrained least squares (dense KKT).
    """
    q = np.asarray(q, dtype=float)
    H = q.shape[0] - 1
    qd = np.zeros_like(q) if qd is None else np.asarray(qd, dtype=float)
    qdd = np.zeros_like(q) if qdd is None else np.asarray(qdd, dtype=float)
    T = t_step
    nv = 3 * (H + 1)
    # per-joint constraint matrix: dynamics plus 6 boundary rows
    mrows = 2 * H + 6
    C = np.zeros((mrows, nv))
    for t in range(H):
        r = 2 * t
        C[r, t + 1] = 1.0
        C[r, t] = -1.0
        C[r, (H + 1) + t] = -T
        C[r, 2 * (H + 1) + t] = -T * T / 3.0
        C[r, 2 * (H + 1) + t + 1] = -T * T / 6.0
        C[r + 1, (H + 1) + t + 1] = 1.0
        C[r + 1, (H + 1) + t] = -1.0
        C[r + 1, 2 * (H + 1) + t] = -T / 2.0
        C[r + 1, 2 * (H + 1) + t + 1] = -T / 2.0
    C[2 * H, 0] = 1.0
    C[2 * H + 1, H] = 1.0
    C[2 * H + 2, (H + 1)] = 1.0
    C[2 * H + 3, (H + 1) + H] = 1.0
    C[2 * H + 4, 2 * (H + 1)] = 1.0
    C[2 * H + 5, 2 * (H + 1) + H] = 1.0
    W = np.diag(np.concatenate([np.ones(H + 1), 1e-6 * np.ones(H + 1),
                                1e-6 * np.ones(H + 1)]))
    kkt = np.block([[2.0 * W, C.T], [C, np.zeros((mrows, mrows))]])
    out_q = np.empty_like(q)
    out_qd = np.empty_like(q)
    out_qdd = np.empty_like(q)
    for j in range(NDOF):
        ref = np.concatenate([q[:, j], qd[:, j], qdd[:, j]])
        b = np.zeros(mrows)
        b[2 * H] = start[j]
        b[2 * H + 1] = goal[j]
        rhs = np.concatenate([2.0 * W @ ref, b])
        sol = np.linalg.solve(kkt, rhs)
        out_q[:, j] = sol[:H + 1]
        out_qd[:, j] = sol[H + 1:2 * (H + 1)]
        out_qdd[:, j] = sol[2 * (H + 1):nv]
    return from_arrays(out_q, out_qd, out_qdd, t_step)


def linear_init(start, goal, H, t_step) -> Trajectory:
    """Straight-line joint-space initializer projected onto the dynamics."""
    q = np.linspace(np.asarray(start, dtype=float),
                    np.asarray(goal, dtype=float), H + 1)
    return project_consistent(q, None, None, t_step, start, goal)


def dense_clearances(traj: Trajectory, world: CollisionWorld,
                     samples_per_segment, inflate):
    """Min clearance at dense interpolation samples over every segment."""
    H = traj.horizon
    n = samples_per_segment
    Q = np.empty((H * n + 1, NDOF))
    k = 0
    for t in range(H):
        a, b = traj.states[t], traj.states[t + 1]
        for s in range(n):
            u = s / float(n)
            Q[k], _ = K._hermite(a.q, a.qd, b.q, b.qd, traj.t_step, u)
            k += 1
    Q[k] = traj.states[-1].q
    return world.clearance(Q, inflate)


# ---------------------------------------------------------------------------
# trust-region SQP loop and the t_step search


@dataclass
class SqpResult:
    success: bool
    trajectory: Trajectory | None
    reason: str                     # success | max-iterations | ...
    iterations: int
    min_clearance: float
    trace: list = field(default_factory=list)


def _merit(world, traj, params, weight):
    """Nonlinear merit: jerk cost plus weighted collision violations."""
    jerk_cost = 0.5 * float(np.sum(traj.jerks ** 2))
    violation = 0.0
    min_clear = np.inf
    inflate = params.inflation + params.solver_margin
    for t in range(traj.horizon):
        a, b = traj.states[t], traj.states[t + 1]
        D, mc, _ = world.segment(a.q, a.qd, b.q, b.qd, traj.t_step,
                                 params.samples_per_segment, inflate)
        if np.isfinite(mc):
            min_clear = min(min_clear, mc)
        if np.isfinite(D) and D < 0.0:
            violation += -D
    return jerk_cost + weight * violation, violation, min_clear, jerk_cost


def _collision_terms(world, traj, params):
    inflate = params.inflation + params.solver_margin
    terms = []
    for t in range(traj.horizon):
        a, b = traj.states[t], traj.states[t + 1]
        D, mc, _ = world.segment(a.q, a.qd, b.q, b.qd, traj.t_step,
                                 params.samples_per_segment, inflate)
        if np.isfinite(mc) and mc < params.near_threshold:
            terms.append(collision_jacobians(
                traj, t, world, world.model, world.box,
                samples=params.samples_per_segment, inflate=inflate,
                h_q=params.fd_step_q, h_qd=params.fd_step_qd))
    return terms


def _verified(world, traj, params, limits):
    clear = dense_clearances(traj, world, params.verify_samples,
                             params.inflation)
    if clear.size and float(clear.min()) < -params.acceptance_tol:
        return False, float(clear.min())
    from .trajectory import check_limits
    rep = check_limits(traj, limits)
    return rep.ok(tol=1e-6), float(clear.min()) if clear.size else np.inf


def sqp_solve(start, goal, env, box, t_step=None, params=None, model=None,
              init=None) -> SqpResult:
    """Trust-region SQP over the stacked-state QP subproblems.

    Success requires the dense verification pass (inflated capsules) to
    report clearance within the acceptance tolerance; the loop stops at the
    first verified feasible iterate.
    """
    from .robot import KinematicModel

    params = params or SqpParams()
    model = model or KinematicModel()
    t_step = params.t_step if t_step is None else float(t_step)
    H = params.horizon
    limits = model.limits
    world = env if isinstance(env, CollisionWorld) else CollisionWorld(
        model, box, env)

    ref = init if init is not None else linear_init(start, goal, H, t_step)
    if ref.horizon != H or abs(ref.t_step - t_step) > 1e-12:
        raise ValueError("initializer horizon or t_step mismatch")

    trust = params.trust_radius
    weight = params.collision_weight
    trace = []
    x_warm = None
    y_warm = None
    stalled = 0
    merit_ref, viol_ref, mc_ref, jerk_ref = _merit(world, ref, params, weight)
    if viol_ref <= 0.0 and mc_ref >= 0.0:
        ok, mc = _verified(world, ref, params, limits)
        if ok:
            return SqpResult(True, ref, "success", 0, mc, trace)

    terms = None
    for it in range(1, params.max_iterations + 1):
        if terms is None:
            terms = _collision_terms(world, ref, params)
        prob = build_qp(ref, t_step, start, goal, limits, terms, trust,
                        weight)
        x0 = None
        if x_warm is not None:
            x0 = np.zeros(prob.q.shape[0])
            x0[:x_warm.shape[0]] = x_warm[:prob.q.shape[0]]
        y0 = None
        if y_warm is not None:
            # fixed rows (dynamics/boundary/limits) precede the collision
            # and slack rows, so their duals carry over; collision duals
            # carry over only when the linearization is unchanged
            y_prev, n_terms_prev = y_warm
            m = prob.A.shape[0]
            y0 = np.zeros(m)
            if n_terms_prev == len(terms) and len(y_prev) == m:
                y0[:] = y_prev
            else:
                k = min(len(y_prev) - 2 * n_terms_prev, m - 2 * len(terms))
                y0[:k] = y_prev[:k]
        sol = qp_solve(prob, tol=params.qp_tol, max_iter=params.qp_max_iter,
                       x0=x0, y0=y0, rel_tol=params.qp_rel_tol)
        if sol.y is not None:
            y_warm = (sol.y, len(terms))
        if sol.status == "infeasible":
            return SqpResult(False, None, "qp-infeasible", it, mc_ref, trace)
        if sol.x is None:
            return SqpResult(False, None, "qp-infeasible", it, mc_ref, trace)
        cand = _states_from_x(sol.x[:_var_layout(H)], H, t_step)
        merit_cand, viol_cand, mc_cand, jerk_cand = _merit(
            world, cand, params, weight)
        accepted = merit_cand < merit_ref - 1e-12
        trace.append({
            "iteration": it, "objective": jerk_cand, "violation": viol_cand,
            "trust": trust, "weight": weight, "min_clearance": mc_cand,
            "accepted": bool(accepted), "qp_iterations": sol.iterations,
        })
        if viol_cand <= 0.0 and mc_cand >= 0.0:
            final = project_consistent(
                cand.positions(), cand.velocities(), cand.accelerations(),
                t_step, start, goal)
            ok, mc = _verified(world, final, params, limits)
            if ok:
                return SqpResult(True, final, "success", it, mc, trace)
        if accepted:
            ref = cand
            merit_ref, viol_ref, mc_ref, jerk_ref = (
                merit_cand, viol_cand, mc_cand, jerk_cand)
            trust = min(trust * params.trust_grow, params.trust_max)
            x_warm = sol.x
            stalled = 0
            terms = None  # linearization point moved
        else:
            trust *= params.trust_shrink
            weight = min(weight * 2.0, params.weight_max)
            merit_ref = jerk_ref + weight * viol_ref
            stalled += 1
            if trust < params.trust_min:
                return SqpResult(False, None, "trust-region-collapse", it,
                                 mc_ref, trace)
            if stalled >= params.stall_iterations:
                return SqpResult(False, None, "stalled", it, mc_ref, trace)
    return SqpResult(False, None, "max-iterations", params.max_iterations,
                     mc_ref, trace)


def rescale_trajectory(traj: Trajectory, new_t_step) -> Trajectory:
    """Same waypoints traversed with a different segment duration."""
    ratio = traj.t_step / new_t_step
    return from_arrays(traj.positions(), traj.velocities() * ratio,
                       traj.accelerations() * ratio ** 2, new_t_step)


@dataclass
class TstepResult:
    success: bool
    trajectory: Trajectory | None
    t_step: float
    solves: int
    reason: str = "success"


def _grid_snap(t, res):
    return max(res, round(t / res) * res)


def optimize_tstep(start, goal, env, box, params=None, model=None,
                   warm=None) -> TstepResult:
    """Binary search for the smallest feasible segment duration.

    Cold runs begin at the configured initial t_step (doubling up to a
    4x-initial upper bound when infeasible); warm runs begin at the
    predicted duration with the predicted trajectory as the initializer.
    Each solve is warm started from the previous solution, and a final
    descending probe re-solves just below the returned duration so the
    result is minimal on the search grid.
    """
    from .robot import KinematicModel

    params = params or SqpParams()
    model = model or KinematicModel()
    world = env if isinstance(env, CollisionWorld) else CollisionWorld(
        model, box, env)
    res = params.resolution
    solves = 0

    def attempt(t, init_traj):
        nonlocal solves
        solves += 1
        init = None
        if init_traj is not None:
            init = rescale_trajectory(init_traj, t)
            init = project_consistent(init.positions(), init.velocities(),
                                      init.accelerations(), t, start, goal)
        r = sqp_solve(start, goal, world, box, t_step=t, params=params,
                      model=model, init=init)
        return r

    lo = 0.0
    best = None
    if warm is not None:
        warm_traj, warm_t = warm
        t = _grid_snap(warm_t, res)
        r = attempt(t, warm_traj)
        if r.success:
            # trust the prediction: the descending probe below establishes
            # minimality without a full bisection from zero
            best, hi = r.trajectory, t
            lo = hi
        else:
            lo = t
            hi = None
            while t < 4.0 * params.t_step - 1e-9:
                t = _grid_snap(2.0 * t, res)
                r = attempt(t, warm_traj)
                if r.success:
                    best, hi = r.trajectory, t
                    break
                lo = t
            if best is None:
                return TstepResult(False, None, np.nan, solves,
                                   "no feasible t_step")
    else:
        t = _grid_snap(params.t_step, res)
        r = attempt(t, None)
        doublings = 0
        while not r.success and doublings < params.max_doublings:
            t = _grid_snap(2.0 * t, res)
            r = attempt(t, None)
            doublings += 1
        if not r.success:
            return TstepResult(False, None, np.nan, solves,
                               "no feasible t_step")
        best, hi = r.trajectory, t

    while hi - lo > res + 1e-9:
        mid = _grid_snap(0.5 * (lo + hi), res)
        if mid >= hi - 1e-9:
            mid = hi - res
        if mid <= lo + 1e-9:
            break
        r = attempt(mid, best)
        if r.success:
            best, hi = r.trajectory, mid
        else:
            lo = mid

    # descending probe: the returned duration must not admit a faster solve
    while hi - res > 1e-9:
        r = attempt(hi - res, best)
        if not r.success:
            break
        best, hi = r.trajectory, hi - res
    return TstepResult(True, best, hi, solves)
