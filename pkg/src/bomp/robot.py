"""Six-axis serial arm kinematics and the grasped-box capsule model.

The default model is a UR5 (manufacturer DH table) with a long-nosed
suction tool modeled as a single capsule along the flange z-axis. Only the
tool and the grasped box are collision-checked; the wrist and upper arm are
assumed to stay clear of the bin.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geom import Capsule

NDOF = 6

# UR5 standard DH parameters (a, d, alpha) per joint
UR5_DH = np.array([
    [0.0,      0.089159,  np.pi / 2],
    [-0.425,   0.0,       0.0],
    [-0.39225, 0.0,       0.0],
    [0.0,      0.10915,   np.pi / 2],
    [0.0,      0.09465,  -np.pi / 2],
    [0.0,      0.0823,    0.0],
])

TOOL_LENGTH = 0.45
TOOL_RADIUS = 0.02


@dataclass(frozen=True)
class Limits:
    q_min: np.ndarray
    q_max: np.ndarray
    v_max: np.ndarray
    a_max: np.ndarray
    j_max: np.ndarray

    def __post_init__(self):
        for name in ("q_min", "q_max", "v_max", "a_max", "j_max"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.q_min >= self.q_max):
            raise ValueError("q_min must be < q_max")
        for name in ("v_max", "a_max", "j_max"):
            if np.any(getattr(self, name) <= 0.0):
                raise ValueError(f"{name} must be strictly positive")

    def contains(self, q, tol=0.0):
        q = np.asarray(q)
        return bool(np.all(q >= self.q_min - tol) and np.all(q <= self.q_max + tol))


def default_limits() -> Limits:
    return Limits(
        q_min=-2.0 * np.pi * np.ones(NDOF),
        q_max=2.0 * np.pi * np.ones(NDOF),
        v_max=np.pi * np.ones(NDOF),
        a_max=8.0 * np.ones(NDOF),
        j_max=80.0 * np.ones(NDOF),
    )


def _dh_matrix(theta, a, d, alpha):
    ct, st = np.cos(theta), np.sin(theta)
    ca, sa = np.cos(alpha), np.sin(alpha)
    return np.array([
        [ct, -st * ca,  st * sa, a * ct],
        [st,  ct * ca, -ct * sa, a * st],
        [0.0,      sa,       ca,      d],
        [0.0,     0.0,      0.0,    1.0],
    ])


@dataclass(frozen=True)
class KinematicModel:
    dh: np.ndarray = field(default_factory=lambda: UR5_DH.copy())
    tool_transform: np.ndarray = field(
        default_factory=lambda: _translation([0.0, 0.0, TOOL_LENGTH]))
    tool_capsules: tuple = field(default_factory=lambda: (
        Capsule([0.0, 0.0, 0.0], [0.0, 0.0, TOOL_LENGTH], TOOL_RADIUS),))
    limits: Limits = field(default_factory=default_limits)

    def __post_init__(self):
        object.__setattr__(self, "dh", np.asarray(self.dh, dtype=float))
        if self.dh.shape != (NDOF, 3):
            raise ValueError("expected 6 DH rows of (a, d, alpha)")
        if len(self.tool_capsules) < 1:
            raise ValueError("at least one tool capsule is required")

    def save(self, path):
        data = {
            "dh": self.dh.tolist(),
            "tool_transform": np.asarray(self.tool_transform).tolist(),
            "tool_capsules": [
                {"p0": c.p0.tolist(), "p1": c.p1.tolist(), "radius": c.radius}
                for c in self.tool_capsules
            ],
            "limits": {
                "q_min": self.limits.q_min.tolist(),
                "q_max": self.limits.q_max.tolist(),
                "v_max": self.limits.v_max.tolist(),
                "a_max": self.limits.a_max.tolist(),
                "j_max": self.limits.j_max.tolist(),
            },
        }
        with open(path, "w") as f:
            json.dump(data, f, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            data = json.load(f)
        return cls(
            dh=np.array(data["dh"]),
            tool_transform=np.array(data["tool_transform"]),
            tool_capsules=tuple(
                Capsule(c["p0"], c["p1"], c["radius"]) for c in data["tool_capsules"]),
            limits=Limits(**data["limits"]),
        )


def _translation(t):
    T = np.eye(4)
    T[:3, 3] = t
    return T


def fk_frames(model: KinematicModel, q):
    """Transforms base->frame_i for i = 0..6, plus the tool-tip frame."""
    q = np.asarray(q, dtype=float)
    frames = [np.eye(4)]
    T = np.eye(4)
    for i in range(NDOF):
        a, d, alpha = model.dh[i]
        T = T @ _dh_matrix(q[i], a, d, alpha)
        frames.append(T.copy())
    frames.append(T @ model.tool_transform)
    return frames


def fk(model: KinematicModel, q, grasped_box=None):
    """Tool-tip pose and the world-frame robot capsule set.

    Tool capsules are attached to the flange, the grasped-box capsule (if
    any) to the tool-tip frame.
    """
    frames = fk_frames(model, q)
    flange, tip = frames[NDOF], frames[NDOF + 1]
    capsules = [c.transformed(flange) for c in model.tool_capsules]
    if grasped_box is not None:
        capsules.append(grasped_box.capsule.transformed(tip))
    return tip, capsules


def jacobian_position(model: KinematicModel, q, point):
    """3x6 positional Jacobian of a world-frame point rigidly attached to
    the last link."""
    frames = fk_frames(model, q)
    point = np.asarray(point, dtype=float)
    J = np.zeros((3, NDOF))
    for i in range(NDOF):
        z = frames[i][:3, 2]
        o = frames[i][:3, 3]
        J[:, i] = np.cross(z, point - o)
    return J


def fk_batch(model: KinematicModel, Q):
    """Vectorized fk over Q of shape (N, 6).

    Returns (flange (N,4,4), tip (N,4,4), joint_origins (N,7,3),
    joint_axes (N,7,3)); origins/axes index i is the frame the i-th joint
    rotates about (frame i-1 in fk_frames terms).
    """
    Q = np.asarray(Q, dtype=float)
    n = Q.shape[0]
    T = np.tile(np.eye(4), (n, 1, 1))
    origins = np.zeros((n, NDOF + 1, 3))
    axes = np.zeros((n, NDOF + 1, 3))
    axes[:, 0, 2] = 1.0
    for i in range(NDOF):
        a, d, alpha = model.dh[i]
        ct, st = np.cos(Q[:, i]), np.sin(Q[:, i])
        ca, sa = np.cos(alpha), np.sin(alpha)
        A = np.zeros((n, 4, 4))
        A[:, 0, 0], A[:, 0, 1], A[:, 0, 2], A[:, 0, 3] = ct, -st * ca, st * sa, a * ct
        A[:, 1, 0], A[:, 1, 1], A[:, 1, 2], A[:, 1, 3] = st, ct * ca, -ct * sa, a * st
        A[:, 2, 1], A[:, 2, 2], A[:, 2, 3] = sa, ca, d
        A[:, 3, 3] = 1.0
        T = T @ A
        origins[:, i + 1] = T[:, :3, 3]
        axes[:, i + 1] = T[:, :3, 2]
    tip = T @ model.tool_transform
    return T, tip, origins, axes


def _wrap(angle):
    """Wrap to (-pi, pi]."""
    a = (angle + np.pi) % (2.0 * np.pi) - np.pi
    if a <= -np.pi:
        a += 2.0 * np.pi
    return a


def ik(model: KinematicModel, pose, tol=1e-8):
    """All joint solutions reaching the given tool-tip pose.

    Closed-form UR-style inverse kinematics (parallel joints 2-4); returns
    up to 8 solutions, each verified by fk to the given tolerance.
    Unreachable poses yield an empty list.
    """
    T06 = np.asarray(pose, dtype=float) @ np.linalg.inv(model.tool_transform)
    a2, a3 = model.dh[1, 0], model.dh[2, 0]
    d1, d4, d5, d6 = model.dh[0, 1], model.dh[3, 1], model.dh[4, 1], model.dh[5, 1]

    p6 = T06[:3, 3]
    p5 = p6 - d6 * T06[:3, 2]
    solutions = []

    rho = np.hypot(p5[0], p5[1])
    if rho < abs(d4) - 1e-12:
        return []
    psi = np.arctan2(p5[1], p5[0])
    beta = np.arcsin(np.clip(d4 / max(rho, abs(d4)), -1.0, 1.0))
    for q1 in (psi + beta, psi + np.pi - beta):
        s1, c1 = np.sin(q1), np.cos(q1)
        c5 = (s1 * p6[0] - c1 * p6[1] - d4) / d6
        if abs(c5) > 1.0 + 1e-9:
            continue
        c5 = np.clip(c5, -1.0, 1.0)
        for q5 in (np.arccos(c5), -np.arccos(c5)):
            s5 = np.sin(q5)
            if abs(s5) < 1e-10:
                q6 = 0.0  # wrist singularity: q6 is free, pick 0
            else:
                sgn = np.sign(s5)
                q6 = np.arctan2(sgn * -(T06[0, 1] * s1 - T06[1, 1] * c1),
                                sgn * (T06[0, 0] * s1 - T06[1, 0] * c1))
            # remaining planar 3R chain: T14 = T01^-1 T06 T56^-1 T45^-1
            T01 = _dh_matrix(q1, *model.dh[0])
            T45 = _dh_matrix(q5, *model.dh[4])
            T56 = _dh_matrix(q6, *model.dh[5])
            T14 = np.linalg.inv(T01) @ T06 @ np.linalg.inv(T45 @ T56)
            x, y = T14[0, 3], T14[1, 3]
            c3 = (x * x + y * y - a2 * a2 - a3 * a3) / (2.0 * a2 * a3)
            if abs(c3) > 1.0 + 1e-9:
                continue
            c3 = np.clip(c3, -1.0, 1.0)
            for q3 in (np.arccos(c3), -np.arccos(c3)):
                s3 = np.sin(q3)
                q2 = np.arctan2(y, x) - np.arctan2(a3 * s3, a2 + a3 * c3)
                q234 = np.arctan2(T14[1, 0], T14[0, 0])
                q4 = q234 - q2 - q3
                sol = np.array([_wrap(v) for v in (q1, q2, q3, q4, q5, q6)])
                solutions.append(sol)

    # verify and deduplicate modulo 2*pi
    out = []
    for sol in solutions:
        got = fk_frames(model, sol)[NDOF + 1]
        if np.abs(got[:3, 3] - pose[:3, 3]).max() > tol:
            continue
        if np.abs(got[:3, :3] - np.asarray(pose)[:3, :3]).max() > tol:
            continue
        if any(np.abs(_wrap_vec(sol - o)).max() < 1e-6 for o in out):
            continue
        out.append(sol)
    return out


def wrap_to_near(q, q_ref, limits=None):
    """Shift each joint of q by multiples of 2*pi onto the branch nearest
    q_ref, optionally clipped to limits (a +/- 2*pi range always contains
    an equivalent configuration)."""
    q = np.asarray(q, dtype=float)
    q_ref = np.asarray(q_ref, dtype=float)
    out = q + 2.0 * np.pi * np.round((q_ref - q) / (2.0 * np.pi))
    if limits is not None:
        over = out > limits.q_max
        out[over] -= 2.0 * np.pi
        under = out < limits.q_min
        out[under] += 2.0 * np.pi
    return out


def _wrap_vec(v):
    return (np.asarray(v) + np.pi) % (2.0 * np.pi) - np.pi


def elbow_is_down(model: KinematicModel, q):
    """True when the elbow arches above the shoulder-wrist chord (the
    concave-down branch that lets the arm lift without flipping)."""
    frames = fk_frames(model, q)
    s = frames[1][:3, 3]  # shoulder (joint-2 origin)
    e = frames[2][:3, 3]  # elbow (joint-3 origin)
    w = frames[3][:3, 3]  # wrist (joint-4 origin)
    chord = w - s
    denom = float(chord @ chord)
    t = float(np.clip(((e - s) @ chord) / denom, 0.0, 1.0)) if denom > 1e-12 else 0.0
    line_z = s[2] + t * chord[2]
    return e[2] > line_z + 1e-9


# reference posture used only to break ties among elbow-down solutions
_REFERENCE_Q = np.array([0.0, -1.2, 1.2, -1.5, -1.5, 0.0])


def select_elbow_down(model: KinematicModel, solutions):
    """Pick the elbow-down solution; None when no branch qualifies."""
    down = [q for q in solutions if elbow_is_down(model, q)]
    if not down:
        return None
    return min(down, key=lambda q: float(np.linalg.norm(_wrap_vec(q - _REFERENCE_Q))))


# the known candidate box dimension set, inches -> meters (sorted descending)
INCH = 0.0254
BOX_CANDIDATES = tuple(
    tuple(sorted((a * INCH, b * INCH, c * INCH), reverse=True))
    for a, b, c in ((4, 4, 2), (6, 4, 3), (7, 5, 2), (9, 6, 3))
)

FACES = ("+x", "-x", "+y", "-y", "+z", "-z")
_FACE_NORMALS = {
    "+x": np.array([1.0, 0, 0]), "-x": np.array([-1.0, 0, 0]),
    "+y": np.array([0, 1.0, 0]), "-y": np.array([0, -1.0, 0]),
    "+z": np.array([0, 0, 1.0]), "-z": np.array([0, 0, -1.0]),
}


@dataclass(frozen=True)
class GraspedBox:
    dims: np.ndarray          # box edge lengths (box frame x, y, z)
    grasp_face: str
    capsule: Capsule          # in the tool-tip (end-effector) frame
    box_to_ee: np.ndarray     # pose of the box frame in the end-effector frame
    known: bool = True

    def __post_init__(self):
        object.__setattr__(self, "dims", np.asarray(self.dims, dtype=float))


def attach_box(dims, grasp_face="+z", suction_offset=(0.0, 0.0)) -> GraspedBox:
    """Capsule model of a box held by suction on the center of a face.

    The tool z-axis points into the box through the suction point. The
    capsule axis runs along the box's longest dimension through its center;
    radius is half the diagonal of the cross-section spanned by the two
    smallest dimensions, which fully circumscribes the box.
    """
    dims = np.asarray(dims, dtype=float)
    if np.any(dims <= 0.0):
        raise ValueError("box dimensions must be positive")
    if grasp_face not in FACES:
        raise ValueError(f"unknown face {grasp_face!r}")
    n = _FACE_NORMALS[grasp_face]
    axis_idx = int(np.argmax(np.abs(n)))
    R_ee_from_box = _box_to_ee_rotation(n)

    thickness = dims[axis_idx]
    du, dv = np.asarray(suction_offset, dtype=float)
    center_box = np.zeros(3)  # box center in box frame is the origin
    # suction point on the face, in the box frame
    suction_box = 0.5 * thickness * n
    uidx, vidx = [i for i in range(3) if i != axis_idx]
    suction_box[uidx] += du
    suction_box[vidx] += dv
    # ee origin sits at the suction point
    center_ee = R_ee_from_box @ (center_box - suction_box)

    order = np.argsort(dims)[::-1]
    long_idx = int(order[0])
    a, b = dims[order[1]], dims[order[2]]
    radius = 0.5 * np.hypot(a, b)
    axis_box = np.zeros(3)
    axis_box[long_idx] = 1.0
    axis_ee = R_ee_from_box @ axis_box
    half = 0.5 * dims[long_idx]
    capsule = Capsule(center_ee - half * axis_ee, center_ee + half * axis_ee, radius)

    box_to_ee = np.eye(4)
    box_to_ee[:3, :3] = R_ee_from_box
    box_to_ee[:3, 3] = center_ee
    known = tuple(np.round(sorted(dims, reverse=True), 9)) in {
        tuple(np.round(c, 9)) for c in BOX_CANDIDATES}
    return GraspedBox(dims, grasp_face, capsule, box_to_ee, known=known)


def _box_to_ee_rotation(face_normal):
    """Rotation whose columns are the box axes expressed in the ee frame."""
    z_ee_in_box = -face_normal  # ee z-axis in box coordinates
    axis_idx = int(np.argmax(np.abs(face_normal)))
    x_ee_in_box = np.zeros(3)
    x_ee_in_box[(axis_idx + 1) % 3] = 1.0
    y_ee_in_box = np.cross(z_ee_in_box, x_ee_in_box)
    # R_ee_from_box rows are ee axes in box coords; transpose to get columns
    R_rows = np.vstack([x_ee_in_box, y_ee_in_box, z_ee_in_box])
    return R_rows  # orthonormal; maps box-frame vectors into ee frame
