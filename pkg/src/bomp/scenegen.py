"""Simulated deep-bin scenes and the picking front end.

Boxes are dropped one at a time into the bin with a quasi-static settle
(no physics engine): each box gets a random yaw and a face-down bias, is
lowered at a sampled (x, y) until it rests on the floor or on earlier
boxes, with a small orientation jitter that snaps back to face-down when
close. An overhead orthographic render turns a scene into the height map
the planner consumes; target selection, box dimension matching against
the known candidate set, and suction grasp selection mirror the picking
pipeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import _kernels as K
from .heightmap import BinSpec, HeightMap, from_depth, grid_for_bin
from .robot import (
    BOX_CANDIDATES,
    FACES,
    GraspedBox,
    attach_box,
    ik,
    select_elbow_down,
)

# fixed rasterization resolution; requested render shapes must tile it
BASE_SHAPE = (480, 640)

_FACE_NORMALS = {
    "+x": np.array([1.0, 0, 0]), "-x": np.array([-1.0, 0, 0]),
    "+y": np.array([0, 1.0, 0]), "-y": np.array([0, -1.0, 0]),
    "+z": np.array([0, 0, 1.0]), "-z": np.array([0, 0, -1.0]),
}


@dataclass
class PlacedBox:
    dims: np.ndarray        # edge lengths in the box frame
    pose: np.ndarray        # box frame -> world
    candidate: int          # index into the candidate dimension set

    def __post_init__(self):
        self.dims = np.asarray(self.dims, dtype=float)
        self.pose = np.asarray(self.pose, dtype=float)
        if self.dims.shape != (3,) or self.pose.shape != (4, 4):
            raise ValueError("bad box dims or pose")

    def corners(self):
        half = 0.5 * self.dims
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1)
                          for sz in (-1, 1)], dtype=float)
        return (self.pose[:3, :3] @ (signs * half).T).T + self.pose[:3, 3]

    def top_height(self):
        return float(self.corners()[:, 2].max())


@dataclass
class Scene:
    bin: BinSpec
    boxes: list
    seed: int
    overflow: bool = False

    def save(self, path):
        data = {
            "seed": int(self.seed),
            "overflow": bool(self.overflow),
            "bin": {
                "inner_dims": self.bin.inner_dims.tolist(),
                "wall_thickness": self.bin.wall_thickness,
                "pose": self.bin.pose.ravel().tolist(),
            },
            "boxes": [
                {"dims": b.dims.tolist(), "pose": b.pose.ravel().tolist(),
                 "candidate": int(b.candidate)} for b in self.boxes
            ],
        }
        with open(path, "w") as f:
            json.dump(data, f)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            data = json.load(f)
        bin_spec = BinSpec(np.array(data["bin"]["inner_dims"]),
                           data["bin"]["wall_thickness"],
                           np.array(data["bin"]["pose"]).reshape(4, 4))
        boxes = [PlacedBox(np.array(b["dims"]),
                           np.array(b["pose"]).reshape(4, 4), b["candidate"])
                 for b in data["boxes"]]
        return cls(bin_spec, boxes, data["seed"], data["overflow"])


def remove_box(scene: Scene, index) -> Scene:
    boxes = [b for k, b in enumerate(scene.boxes) if k != index]
    return Scene(scene.bin, boxes, scene.seed, scene.overflow)


# ---------------------------------------------------------------------------
# oriented-box overlap (separating axes)


def obb_separation(dims_a, pose_a, dims_b, pose_b):
    """Largest separation over the 15 candidate axes; negative = overlap.

    For overlapping boxes the magnitude is the separating-axis lower bound
    on the penetration depth.
    """
    Ra = np.asarray(pose_a, dtype=float)[:3, :3]
    Rb = np.asarray(pose_b, dtype=float)[:3, :3]
    ha = 0.5 * np.asarray(dims_a, dtype=float)
    hb = 0.5 * np.asarray(dims_b, dtype=float)
    t = np.asarray(pose_b, dtype=float)[:3, 3] - np.asarray(pose_a, dtype=float)[:3, 3]
    axes = [Ra[:, i] for i in range(3)] + [Rb[:, i] for i in range(3)]
    for i in range(3):
        for j in range(3):
            c = np.cross(Ra[:, i], Rb[:, j])
            n = np.linalg.norm(c)
            if n > 1e-9:
                axes.append(c / n)
    best = -np.inf
    for L in axes:
        ra = np.abs(ha * (Ra.T @ L)).sum()
        rb = np.abs(hb * (Rb.T @ L)).sum()
        best = max(best, abs(float(t @ L)) - ra - rb)
    return best


# ---------------------------------------------------------------------------
# bin filling


def _world_half_extents(R, dims):
    return 0.5 * np.abs(R) @ np.asarray(dims, dtype=float)


def _settle_z(dims, R, cx, cy, others, bin_spec, step=0.005, tol=1e-9):
    """Lowest collision-free center z for a box dropped at (cx, cy)."""
    hz = _world_half_extents(R, dims)[2]
    floor_rest = bin_spec.floor_z + hz

    def pose_at(cz):
        T = np.eye(4)
        T[:3, :3] = R
        T[:3, 3] = [cx, cy, cz]
        return T

    def overlaps(cz):
        T = pose_at(cz)
        for b in others:
            if obb_separation(dims, T, b.dims, b.pose) < 0.0:
                return True
        return False

    tallest = max([b.top_height() for b in others], default=bin_spec.floor_z)
    cz = max(floor_rest, tallest + hz) + step
    if overlaps(cz):
        return None  # no room even above the pile
    while cz - step >= floor_rest and not overlaps(cz - step):
        cz -= step
    if cz - step < floor_rest and not overlaps(floor_rest):
        return floor_rest
    lo = max(cz - step, floor_rest)  # overlapping (or floor)
    hi = cz
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if overlaps(mid):
            lo = mid
        else:
            hi = mid
    return hi


def _sample_orientation(rng, dims):
    """Random yaw with a face-down bias and a snapped orientation jitter."""
    up = int(rng.integers(3))
    # rotate the chosen box axis onto world z
    if up == 0:
        align = Rotation.from_euler("y", -np.pi / 2)
    elif up == 1:
        align = Rotation.from_euler("x", np.pi / 2)
    else:
        align = Rotation.identity()
    yaw = rng.uniform(0.0, 2.0 * np.pi)
    jit = rng.normal(0.0, np.deg2rad(10.0), 2)
    if np.hypot(jit[0], jit[1]) < np.deg2rad(15.0):
        jit[:] = 0.0  # snap to face-down
    R = (Rotation.from_euler("z", yaw) * Rotation.from_euler("xy", jit)
         * align).as_matrix()
    return R


def fill_bin(seed, candidates=BOX_CANDIDATES, count=(5, 15), bin_spec=None,
             weights=None) -> Scene:
    """Drop-and-settle scene generation, deterministic per seed."""
    bin_spec = bin_spec or BinSpec()
    rng = np.random.default_rng(seed)
    n = int(rng.integers(count[0], count[1] + 1))
    lo_in, hi_in = bin_spec.inner_rect()
    boxes = []
    overflow = False
    for _ in range(n):
        cand = int(rng.choice(len(candidates), p=weights))
        dims = np.asarray(candidates[cand], dtype=float)
        placed = False
        for _attempt in range(40):
            R = _sample_orientation(rng, dims)
            he = _world_half_extents(R, dims)
            margin = 1e-3
            span_lo = lo_in + he[:2] + margin
            span_hi = hi_in - he[:2] - margin
            if np.any(span_lo >= span_hi):
                continue  # footprint larger than the bin interior
            cx = rng.uniform(span_lo[0], span_hi[0])
            cy = rng.uniform(span_lo[1], span_hi[1])
            cz = _settle_z(dims, R, cx, cy, boxes, bin_spec)
            if cz is None:
                continue
            pose = np.eye(4)
            pose[:3, :3] = R
            pose[:3, 3] = [cx, cy, cz]
            box = PlacedBox(dims, pose, cand)
            if box.top_height() > bin_spec.rim_z:
                overflow = True
                break
            boxes.append(box)
            placed = True
            break
        if overflow or not placed:
            overflow = overflow or not placed
            break
    return Scene(bin_spec, boxes, int(seed), overflow)


# ---------------------------------------------------------------------------
# overhead rendering


def _box_top_grid(box: PlacedBox, X, Y):
    """Top-surface height of the box over each (x, y), -inf where missed.

    The vertical line through (x, y) is intersected with the oriented box
    via the slab method; the top is the exit height.
    """
    R = box.pose[:3, :3]
    c = box.pose[:3, 3]
    half = 0.5 * box.dims
    zlo = np.full(X.shape, -np.inf)
    zhi = np.full(X.shape, np.inf)
    ok = np.ones(X.shape, dtype=bool)
    for i in range(3):
        a = R[0, i] * (X - c[0]) + R[1, i] * (Y - c[1]) - R[2, i] * c[2]
        b = R[2, i]
        if abs(b) < 1e-12:
            ok &= np.abs(a) <= half[i]
        else:
            t0 = (-half[i] - a) / b
            t1 = (half[i] - a) / b
            lo = np.minimum(t0, t1)
            hi = np.maximum(t0, t1)
            zlo = np.maximum(zlo, lo)
            zhi = np.minimum(zhi, hi)
    hit = ok & (zhi >= zlo)
    return np.where(hit, zhi, -np.inf)


def _rasterize(scene: Scene, rows, cols):
    """Heights and owning box index (-1 = bin) at cell centers."""
    cell, origin = grid_for_bin(scene.bin, rows, cols)
    xs = origin[0] + (np.arange(cols) + 0.5) * cell
    ys = origin[1] + (np.arange(rows) + 0.5) * cell
    X, Y = np.meshgrid(xs, ys)
    lo_i, hi_i = scene.bin.inner_rect()
    lo_o, hi_o = scene.bin.outer_rect()
    inner = (X > lo_i[0]) & (X < hi_i[0]) & (Y > lo_i[1]) & (Y < hi_i[1])
    outer = (X > lo_o[0]) & (X < hi_o[0]) & (Y > lo_o[1]) & (Y < hi_o[1])
    heights = np.full((rows, cols), -1.0)
    heights[outer] = scene.bin.rim_z
    heights[inner] = scene.bin.floor_z
    owners = np.full((rows, cols), -1, dtype=int)
    for k, box in enumerate(scene.boxes):
        top = _box_top_grid(box, X, Y)
        better = top > heights
        heights[better] = top[better]
        owners[better] = k
    return heights, owners, cell, origin


def render_heightmap(scene: Scene, rows=30, cols=40, noise=0.0,
                     noise_seed=None) -> HeightMap:
    """Orthographic top-down height map at the requested working shape.

    Rasterizes at a fixed fine resolution then max-pools, so rendering at a
    coarse shape equals rendering fine and downsampling (block-aligned).
    Optional uniform +/- noise (m) is applied after pooling.
    """
    bh, bw = BASE_SHAPE[0] // rows, BASE_SHAPE[1] // cols
    if bh * rows != BASE_SHAPE[0] or bw * cols != BASE_SHAPE[1] or bh != bw:
        raise ValueError("render shape must tile the base resolution in "
                         "square blocks")
    heights, _, cell, origin = _rasterize(scene, *BASE_SHAPE)
    pooled = heights.reshape(rows, bh, cols, bw).max(axis=(1, 3))
    if noise > 0.0:
        rng = np.random.default_rng(
            scene.seed if noise_seed is None else noise_seed)
        pooled = np.maximum(pooled + rng.uniform(-noise, noise, pooled.shape),
                            -1.0)
    return HeightMap(pooled, cell * bh, origin, -1.0)


def render_depth(scene: Scene, intrinsics, camera_pose, shape=(480, 640)):
    """Pinhole depth image of the scene (bin walls, floor, and boxes).

    Rays through pixel centers are intersected with the oriented boxes; the
    bin itself contributes four wall boxes and one floor slab. Depth uses
    the z-depth convention matching the height-map back-projection.
    """
    Kmat = np.asarray(intrinsics, dtype=float)
    T = np.asarray(camera_pose, dtype=float)
    h, w = shape
    us, vs = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    rays = np.linalg.inv(Kmat) @ np.vstack(
        [us.ravel(), vs.ravel(), np.ones(h * w)])
    dirs = T[:3, :3] @ rays
    o = T[:3, 3]
    depth = np.full(h * w, np.inf)
    for box in _bin_boxes(scene.bin) + list(scene.boxes):
        R = box.pose[:3, :3]
        c = box.pose[:3, 3]
        half = 0.5 * box.dims
        ob = R.T @ (o - c)
        db = R.T @ dirs
        tlo = np.full(h * w, -np.inf)
        thi = np.full(h * w, np.inf)
        ok = np.ones(h * w, dtype=bool)
        for i in range(3):
            b = db[i]
            par = np.abs(b) < 1e-12
            ok &= ~par | (np.abs(ob[i]) <= half[i])
            with np.errstate(divide="ignore", invalid="ignore"):
                t0 = (-half[i] - ob[i]) / b
                t1 = (half[i] - ob[i]) / b
            lo = np.where(par, -np.inf, np.minimum(t0, t1))
            hi = np.where(par, np.inf, np.maximum(t0, t1))
            tlo = np.maximum(tlo, lo)
            thi = np.minimum(thi, hi)
        t_hit = np.where(ok & (thi >= np.maximum(tlo, 0.0)),
                         np.maximum(tlo, 0.0), np.inf)
        depth = np.minimum(depth, t_hit)
    depth[~np.isfinite(depth)] = 0.0
    return depth.reshape(h, w)


def _bin_boxes(bin_spec: BinSpec):
    """The bin as five oriented boxes: four walls and a floor slab."""
    w = bin_spec.wall_thickness
    ix, iy, iz = bin_spec.inner_dims
    cx, cy = bin_spec.center_xy
    zf = bin_spec.floor_z
    zc = 0.5 * (bin_spec.rim_z + zf - w)
    dz = bin_spec.rim_z - zf + w
    out = []

    def slab(dims, center):
        T = np.eye(4)
        T[:3, 3] = center
        out.append(PlacedBox(np.asarray(dims, dtype=float), T, -1))

    slab([ix, iy, w], [cx, cy, zf - 0.5 * w])
    slab([ix + 2 * w, w, dz], [cx, cy + 0.5 * (iy + w), zc])
    slab([ix + 2 * w, w, dz], [cx, cy - 0.5 * (iy + w), zc])
    slab([w, iy, dz], [cx + 0.5 * (ix + w), cy, zc])
    slab([w, iy, dz], [cx - 0.5 * (ix + w), cy, zc])
    return out


def heightmap_from_camera(scene: Scene, intrinsics, camera_pose, rows=30,
                          cols=40, shape=(480, 640)) -> HeightMap:
    """Render a depth image and back-project it into the working grid."""
    depth = render_depth(scene, intrinsics, camera_pose, shape)
    cell, origin = grid_for_bin(scene.bin, rows, cols)
    return from_depth(depth, intrinsics, camera_pose, cell, origin,
                      (rows, cols), -1.0, scene.bin.floor_z)


# ---------------------------------------------------------------------------
# picking front end


def select_target(hm: HeightMap, scene: Scene):
    """Index of the box owning the globally highest interior cell, plus the
    prompt point at that cell. None for an empty scene."""
    if not scene.boxes:
        return None
    rows, cols = hm.shape
    heights, owners, _, _ = _rasterize(scene, *BASE_SHAPE)
    bh = BASE_SHAPE[0] // rows
    blocks_h = heights.reshape(rows, bh, cols, bh)
    blocks_o = owners.reshape(rows, bh, cols, bh)
    # only samples owned by a box compete; walls never win
    box_h = np.where(blocks_o >= 0, blocks_h, -np.inf)
    pooled = box_h.max(axis=(1, 3))
    i, j = np.unravel_index(int(np.argmax(pooled)), pooled.shape)
    block_h = box_h[i, :, j, :]
    block_o = blocks_o[i, :, j, :]
    # owner of the highest sample in the winning cell; ties -> lower index
    top = block_h.max()
    owner = int(block_o[block_h >= top - 1e-12].min())
    xs, ys = hm.cell_centers()
    return owner, np.array([xs[j], ys[i], float(top)])


def _candidate_faces(cand_dims):
    d = np.asarray(cand_dims, dtype=float)
    return [(d[0], d[1]), (d[0], d[2]), (d[1], d[2])]


def match_box_dims(rects, candidates=BOX_CANDIDATES):
    """Best candidate dims for the observed face rectangles.

    Each observed (w, h) contributes the minimal face-area difference plus
    the minimal edge-length differences over the candidate's edges; ties go
    to the largest candidate volume.
    """
    rects = [tuple(float(v) for v in r) for r in rects]
    if not rects:
        raise ValueError("need at least one observed rectangle")
    best = None
    for cand in candidates:
        edges = np.asarray(cand, dtype=float)
        score = 0.0
        for w, h in rects:
            score += min(abs(w * h - a * b) for a, b in _candidate_faces(cand))
            score += float(np.abs(edges - w).min() + np.abs(edges - h).min())
        volume = float(np.prod(edges))
        key = (round(score, 12), -volume)
        if best is None or key < best[0]:
            best = (key, cand)
    return np.asarray(best[1], dtype=float)


@dataclass
class GraspPlan:
    target: int
    face: str
    point: np.ndarray          # suction point, world frame
    q0: np.ndarray
    grasped: GraspedBox


def _grasp_candidates(box: PlacedBox, visibility: HeightMap | None):
    """Suction candidates: visible upward faces sorted by normal . z."""
    R = box.pose[:3, :3]
    c = box.pose[:3, 3]
    out = []
    for face in FACES:
        n_box = _FACE_NORMALS[face]
        n_world = R @ n_box
        if n_world[2] <= 0.05:
            continue
        axis = int(np.argmax(np.abs(n_box)))
        center = c + R @ (0.5 * box.dims[axis] * n_box)
        if visibility is not None:
            i, j = visibility.cell_index(center[0], center[1])
            if not (0 <= i < visibility.shape[0]
                    and 0 <= j < visibility.shape[1]):
                continue
            if visibility.heights[i, j] > center[2] + 0.005:
                continue  # occluded from above
        out.append((float(n_world[2]), face, center))
    out.sort(key=lambda t: -t[0])
    return out


def _config_clearance(model, q, grasped, hm, inflate=0.0):
    Q = np.asarray(q, dtype=float).reshape(1, 6)
    return float(K.clearance_batch(
        model.dh, model.tool_transform, *K.pack_tool(model),
        *K.pack_box(grasped), Q, *K.pack_heightmap(hm), inflate)[0])


def select_grasp(scene: Scene, target, model, env: HeightMap,
                 visibility=None):
    """First visible-face candidate with a collision-free elbow-down IK
    solution against the carved environment; None when all fail."""
    box = scene.boxes[target]
    for _dot, face, point in _grasp_candidates(box, visibility):
        grasped = attach_box(box.dims, face)
        tip_pose = box.pose @ np.linalg.inv(grasped.box_to_ee)
        solutions = ik(model, tip_pose)
        q0 = select_elbow_down(model, solutions)
        if q0 is None:
            continue
        if np.any(q0 < model.limits.q_min) or np.any(q0 > model.limits.q_max):
            continue
        if _config_clearance(model, q0, grasped, env) < -1e-6:
            continue
        return GraspPlan(int(target), face, point, q0, grasped)
    return None


# drop-off posture: base turned away from the bin, tool over the drop zone
GOAL_CONFIGURATION = np.array([-2.2, -1.2, 1.4, -1.77, -1.57, 0.0])


def goal_config(model, candidates=BOX_CANDIDATES, bin_spec=None,
                rows=30, cols=40):
    """The fixed drop-off configuration, verified collision-free against
    the empty-bin map with every candidate box attached."""
    bin_spec = bin_spec or BinSpec()
    hm = render_heightmap(Scene(bin_spec, [], 0), rows, cols)
    q = GOAL_CONFIGURATION.copy()
    if np.any(q < model.limits.q_min) or np.any(q > model.limits.q_max):
        raise ValueError("drop-off configuration violates joint limits")
    for cand in list(candidates) + [None]:
        grasped = attach_box(np.asarray(cand), "+z") if cand is not None else None
        if _config_clearance(model, q, grasped, hm) < 0.0:
            raise ValueError(
                f"drop-off configuration collides holding {cand}")
    return q
