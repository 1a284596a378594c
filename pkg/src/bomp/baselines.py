"""Comparison planners: an up-over-down lift heuristic and a joint-space
RRT* with trapezoidal time parameterization.

Both baselines share the capsule collision model with the optimizer but do
not limit jerk; the parameterization stops at every path vertex, which makes
their execution times pessimistic by construction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .heightmap import BinSpec
from .robot import NDOF, _wrap_vec, default_limits, fk, fk_frames, ik
from .sqp import CollisionWorld
from .trajectory import State, Trajectory

WORKSPACE_RESOLUTION = 0.01
# conservative bound on workspace motion per radian of joint motion (the
# whole arm plus a grasped box fits in a 1.2 m reach sphere)
LEVER_ARM = 1.2
PITCH_BACK = np.deg2rad(22.5)


@dataclass
class JointPath:
    """Untimed sequence of configurations."""

    waypoints: list = field(default_factory=list)

    def __post_init__(self):
        self.waypoints = [np.asarray(w, dtype=float) for w in self.waypoints]
        for w in self.waypoints:
            if w.shape != (NDOF,) or not np.all(np.isfinite(w)):
                raise ValueError("waypoints must be finite 6-vectors")

    def length(self):
        if len(self.waypoints) < 2:
            return 0.0
        arr = np.asarray(self.waypoints)
        return float(np.linalg.norm(np.diff(arr, axis=0), axis=1).sum())

    def as_array(self):
        return np.asarray(self.waypoints)


def _as_world(env, model, box):
    if isinstance(env, CollisionWorld):
        return env
    return CollisionWorld(model, box, env)


def _segment_configs(qa, qb, resolution=WORKSPACE_RESOLUTION):
    n = max(int(np.ceil(np.linalg.norm(qb - qa) * LEVER_ARM / resolution)), 1)
    return qa + np.linspace(0.0, 1.0, n + 1)[:, None] * (qb - qa)


def segment_free(world: CollisionWorld, qa, qb, inflate=0.0):
    """Straight joint-space segment checked at 1 cm workspace resolution."""
    return float(world.clearance(_segment_configs(qa, qb), inflate).min()) >= 0.0


def path_collision_free(path: JointPath, world: CollisionWorld, inflate=0.0):
    return all(segment_free(world, a, b, inflate)
               for a, b in zip(path.waypoints, path.waypoints[1:]))


# ---------------------------------------------------------------------------
# trapezoidal time parameterization


def _trapezoid(dq, limits):
    """Normalized trapezoid for one straight segment.

    All joints share the time scaling s(t) in [0, 1]; its velocity and
    acceleration caps are the tightest per-joint ratios, so every joint
    stays within its own limits.  Returns (duration, t_accel, t_cruise,
    s_accel) or None for a zero-length segment.
    """
    mag = np.abs(dq)
    if mag.max() == 0.0:
        return None
    active = mag > 0.0
    V = (limits.v_max[active] / mag[active]).min()
    A = (limits.a_max[active] / mag[active]).min()
    if V * V / A >= 1.0:                      # triangular: never hits V
        ta = np.sqrt(1.0 / A)
        return 2.0 * ta, ta, 0.0, A
    ta = V / A
    tc = (1.0 - V * V / A) / V
    return 2.0 * ta + tc, ta, tc, A


def _trapezoid_eval(t, T, ta, tc, A):
    """(s, s_dot, s_ddot) of the normalized profile at time t in [0, T]."""
    vpk = A * ta
    if t < ta:
        return 0.5 * A * t * t, A * t, A
    if t < ta + tc:
        return 0.5 * A * ta * ta + vpk * (t - ta), vpk, 0.0
    tr = max(T - t, 0.0)
    return 1.0 - 0.5 * A * tr * tr, A * tr, -A


def path_duration(path: JointPath, limits=None):
    """Total duration of the vertex-stop trapezoidal parameterization."""
    limits = limits or default_limits()
    total = 0.0
    for a, b in zip(path.waypoints, path.waypoints[1:]):
        seg = _trapezoid(b - a, limits)
        if seg is not None:
            total += seg[0]
    return total


def time_parameterize(path: JointPath, limits=None, dt=0.05) -> Trajectory:
    """Synchronized trapezoidal profiles with zero velocity at every vertex.

    Velocity and acceleration limits are respected exactly; jerk is left
    unlimited on purpose.  The concatenated profile is resampled onto a
    uniform grid of at most dt so that the trajectory duration equals the
    analytic one.
    """
    if not path.waypoints:
        raise ValueError("empty path")
    limits = limits or default_limits()
    segs = []
    t0 = 0.0
    for a, b in zip(path.waypoints, path.waypoints[1:]):
        tz = _trapezoid(b - a, limits)
        if tz is None:
            continue
        segs.append((t0, a, b - a) + tz)
        t0 += tz[0]
    if not segs:
        q = path.waypoints[0]
        return Trajectory([State(q, np.zeros(NDOF), np.zeros(NDOF))] * 2,
                          1e-9)
    total = t0
    H = max(int(np.ceil(total / dt)), 1)
    step = total / H
    states = []
    k = 0
    for i in range(H + 1):
        t = min(i * step, total)
        while k + 1 < len(segs) and t >= segs[k + 1][0]:
            k += 1
        ts, qa, dq, T, ta, tc, A = segs[k]
        s, sd, sdd = _trapezoid_eval(min(t - ts, T), T, ta, tc, A)
        states.append(State(qa + s * dq, sd * dq, sdd * dq))
    return Trajectory(states, step)


# ---------------------------------------------------------------------------
# up-over-down heuristic


@dataclass
class UodResult:
    success: bool
    trajectory: Trajectory | None
    path: JointPath | None
    reason: str


def _nearest_solution(model, pose, q_prev, limits, max_jump=0.35):
    """IK solution continuing the current branch, or None."""
    best, best_d = None, max_jump
    for sol in ik(model, pose):
        cand = q_prev + _wrap_vec(sol - q_prev)
        if not limits.contains(cand):
            continue
        d = np.abs(cand - q_prev).max()
        if d < best_d:
            best, best_d = cand, d
    return best


def _lowest_capsule_z(model, q, box):
    _, capsules = fk(model, q, box)
    return min(min(c.p0[2], c.p1[2]) - c.radius for c in capsules)


def _step_through_poses(world, model, poses, q_prev, limits, inflate,
                        waypoints):
    """Append IK solutions for a pose sequence; returns (ok, reason)."""
    for pose in poses:
        q = _nearest_solution(model, pose, q_prev, limits)
        if q is None:
            return False, "ik-infeasible"
        if world.clearance(q[None, :], inflate)[0] < 0.0:
            return False, "collision"
        waypoints.append(q)
        q_prev = q
    return True, ""


def up_over_down(q0, goal_pose, env, box, model, bin_spec=None, limits=None,
                 inflate=0.01, clear_margin=0.05, max_rise=1.2,
                 pitch_steps=10) -> UodResult:
    """Lift straight up, pitch back 22.5 degrees while rising, transit over
    the rim, and lower onto the drop-off pose.

    Stages 1-2 climb in 1 cm increments to their feasibility limit; the
    plan fails with rim-not-cleared when the grasped box is still below the
    bin rim at that point.
    """
    bin_spec = bin_spec or BinSpec()
    limits = limits or default_limits()
    world = _as_world(env, model, box)
    q0 = np.asarray(q0, dtype=float)
    if world.clearance(q0[None, :], inflate)[0] < 0.0:
        return UodResult(False, None, None, "collision")

    waypoints = [q0]
    pose0 = fk_frames(model, q0)[NDOF + 1]
    rim = bin_spec.rim_z + clear_margin
    # the climb only applies when the pick actually starts over the bin
    lo_in, hi_in = bin_spec.inner_rect()
    pad = bin_spec.wall_thickness + 0.05
    over_bin = (lo_in[0] - pad <= pose0[0, 3] <= hi_in[0] + pad
                and lo_in[1] - pad <= pose0[1, 3] <= hi_in[1] + pad)

    def clears(q):
        return not over_bin or _lowest_capsule_z(model, q, box) >= rim

    # stage 1: straight vertical rise to the feasibility limit
    q_prev, z = q0, pose0[2, 3]
    reason = ""
    steps = int(max_rise / WORKSPACE_RESOLUTION) if over_bin else 0
    for _ in range(steps):
        pose = pose0.copy()
        pose[2, 3] = z + WORKSPACE_RESOLUTION
        q = _nearest_solution(model, pose, q_prev, limits)
        if q is None:
            reason = "ik-infeasible"
            break
        if world.clearance(q[None, :], inflate)[0] < 0.0:
            reason = "collision"
            break
        z += WORKSPACE_RESOLUTION
        waypoints.append(q)
        q_prev = q
        if clears(q):
            break

    # stage 2: keep rising while pitching the box away from the nearest wall
    cx, cy = bin_spec.center_xy
    hx, hy = bin_spec.inner_dims[0] / 2.0, bin_spec.inner_dims[1] / 2.0
    px, py = pose0[0, 3], pose0[1, 3]
    wall_gaps = [(hx - (px - cx), np.array([-1.0, 0.0, 0.0])),
                 (hx + (px - cx), np.array([1.0, 0.0, 0.0])),
                 (hy - (py - cy), np.array([0.0, -1.0, 0.0])),
                 (hy + (py - cy), np.array([0.0, 1.0, 0.0]))]
    away = min(wall_gaps, key=lambda g: g[0])[1]
    axis = np.cross(away, np.array([0.0, 0.0, 1.0]))
    axis /= np.linalg.norm(axis)
    pitch = 0.0
    for _ in range(0 if clears(q_prev) else steps):
        pitch = min(pitch + PITCH_BACK / pitch_steps, PITCH_BACK)
        pose = pose0.copy()
        pose[:3, :3] = Rotation.from_rotvec(axis * pitch).as_matrix() \
            @ pose0[:3, :3]
        pose[2, 3] = z + WORKSPACE_RESOLUTION
        q = _nearest_solution(model, pose, q_prev, limits)
        if q is None:
            reason = "ik-infeasible"
            break
        if world.clearance(q[None, :], inflate)[0] < 0.0:
            reason = "collision"
            break
        z += WORKSPACE_RESOLUTION
        waypoints.append(q)
        q_prev = q
        if clears(q):
            break

    if not clears(q_prev):
        return UodResult(False, None, None, "rim-not-cleared")

    # stage 3: horizontal transit above the rim to over the drop-off
    pose_top = fk_frames(model, q_prev)[NDOF + 1]
    goal_pose = np.asarray(goal_pose, dtype=float)
    transit_z = max(pose_top[2, 3], goal_pose[2, 3])
    start_xy = pose_top[:2, 3]
    goal_xy = goal_pose[:2, 3]
    dist = np.linalg.norm(goal_xy - start_xy) + abs(transit_z - pose_top[2, 3])
    n = max(int(np.ceil(dist / WORKSPACE_RESOLUTION)), 1)
    poses = []
    for i in range(1, n + 1):
        u = i / n
        pose = pose_top.copy()
        pose[:2, 3] = start_xy + u * (goal_xy - start_xy)
        pose[2, 3] = pose_top[2, 3] + u * (transit_z - pose_top[2, 3])
        poses.append(pose)
    ok, why = _step_through_poses(world, model, poses, q_prev, limits,
                                  inflate, waypoints)
    if not ok:
        return UodResult(False, None, None, why)
    q_prev = waypoints[-1]

    # stage 4: lower and reorient onto the goal pose
    pose_over = fk_frames(model, q_prev)[NDOF + 1]
    rots = Rotation.from_matrix(
        np.stack([pose_over[:3, :3], goal_pose[:3, :3]]))
    angle = (rots[0].inv() * rots[1]).magnitude()
    dist = np.linalg.norm(goal_pose[:3, 3] - pose_over[:3, 3])
    n = max(int(np.ceil(dist / WORKSPACE_RESOLUTION)),
            int(np.ceil(angle / 0.035)), 1)
    poses = []
    for i in range(1, n + 1):
        u = i / n
        pose = np.eye(4)
        pose[:3, :3] = Rotation.from_rotvec(
            u * (rots[0].inv() * rots[1]).as_rotvec()).as_matrix()
        pose[:3, :3] = pose_over[:3, :3] @ pose[:3, :3]
        pose[:3, 3] = pose_over[:3, 3] + u * (goal_pose[:3, 3]
                                              - pose_over[:3, 3])
        poses.append(pose)
    ok, why = _step_through_poses(world, model, poses, q_prev, limits,
                                  inflate, waypoints)
    if not ok:
        return UodResult(False, None, None, why)

    path = JointPath(waypoints)
    return UodResult(True, time_parameterize(path, limits), path, "success")


# ---------------------------------------------------------------------------
# joint-space RRT*


@dataclass
class RrtResult:
    success: bool
    path: JointPath | None
    cost: float
    reason: str
    iterations: int


def _path_from_tree(nodes, parent, idx, qH):
    chain = []
    while idx >= 0:
        chain.append(nodes[idx].copy())
        idx = parent[idx]
    chain.reverse()
    if np.linalg.norm(chain[-1] - qH) > 0.0:
        chain.append(np.asarray(qH, dtype=float))
    return JointPath(chain)


def rrt_star(q0, qH, env, box, model, budget_s=1.0, seed=0, steer_step=0.1,
             goal_bias=0.05, inflate=0.01, limits=None, gamma=2.0,
             max_nodes=200000) -> RrtResult:
    """Anytime RRT* minimizing joint-space path length.

    Single-threaded and deterministic for a fixed seed; a longer budget only
    continues the same sample stream, so the returned cost never increases
    with the budget.  Straight segments are collision-checked at 1 cm
    workspace resolution.
    """
    limits = limits or default_limits()
    world = _as_world(env, model, box)
    q0 = np.asarray(q0, dtype=float)
    qH = np.asarray(qH, dtype=float)
    if (world.clearance(q0[None, :], inflate)[0] < 0.0
            or world.clearance(qH[None, :], inflate)[0] < 0.0):
        return RrtResult(False, None, np.inf, "endpoint-in-collision", 0)

    lo = np.maximum(np.minimum(q0, qH) - 1.0, limits.q_min)
    hi = np.minimum(np.maximum(q0, qH) + 1.0, limits.q_max)
    rng = np.random.default_rng(seed)

    nodes = np.empty((max_nodes, NDOF))
    nodes[0] = q0
    parent = np.full(max_nodes, -1, dtype=np.int64)
    cost = np.zeros(max_nodes)
    children = [[] for _ in range(max_nodes)]
    n = 1
    goal_links = {}        # node index -> distance to qH (verified free)

    if segment_free(world, q0, qH, inflate):
        goal_links[0] = float(np.linalg.norm(qH - q0))

    deadline = time.monotonic() + budget_s
    iterations = 0
    while time.monotonic() < deadline and n < max_nodes:
        iterations += 1
        sample = qH if rng.random() < goal_bias else rng.uniform(lo, hi)
        d = np.linalg.norm(nodes[:n] - sample, axis=1)
        near_i = int(np.argmin(d))
        dist = d[near_i]
        if dist < 1e-12:
            continue
        q_new = nodes[near_i] + min(steer_step / dist, 1.0) \
            * (sample - nodes[near_i])
        if not limits.contains(q_new):
            continue
        if not segment_free(world, nodes[near_i], q_new, inflate):
            continue

        radius = max(steer_step,
                     min(gamma * (np.log(n + 1) / (n + 1)) ** (1.0 / NDOF),
                         1.0))
        d_new = np.linalg.norm(nodes[:n] - q_new, axis=1)
        near = np.nonzero(d_new <= radius)[0]

        # best parent among the neighborhood
        best_p, best_c = near_i, cost[near_i] + d_new[near_i]
        for j in near[np.argsort(cost[near] + d_new[near])]:
            c = cost[j] + d_new[j]
            if c >= best_c:
                break
            if segment_free(world, nodes[j], q_new, inflate):
                best_p, best_c = int(j), c
                break
        idx = n
        nodes[idx] = q_new
        parent[idx] = best_p
        cost[idx] = best_c
        children[best_p].append(idx)
        n += 1

        # rewire the neighborhood through the new node
        for j in near:
            c = best_c + d_new[j]
            if c < cost[j] - 1e-12 and segment_free(world, q_new, nodes[j],
                                                    inflate):
                children[parent[j]].remove(int(j))
                parent[j] = idx
                children[idx].append(int(j))
                drop = cost[j] - c
                stack = [int(j)]
                while stack:
                    k = stack.pop()
                    cost[k] -= drop
                    stack.extend(children[k])

        gd = float(np.linalg.norm(qH - q_new))
        if gd <= steer_step and segment_free(world, q_new, qH, inflate):
            goal_links[idx] = gd

    if not goal_links:
        return RrtResult(False, None, np.inf, "no-path-within-budget",
                         iterations)
    best_i = min(goal_links, key=lambda i: cost[i] + goal_links[i])
    best_cost = cost[best_i] + goal_links[best_i]
    return RrtResult(True, _path_from_tree(nodes, parent, best_i, qH),
                     float(best_cost), "success", iterations)
