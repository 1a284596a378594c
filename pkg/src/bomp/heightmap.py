"""Height-map collision environment.

A height map stores, for each grid cell over the bin footprint, the top
height z_ij of the occupied column reaching down to a world bottom z0. Each
cell converts to one vertical capsule whose cylindrical section runs from
z0 to z_ij; the spherical cap extends a cell radius above z_ij, a small
conservative over-bound (~1.6 cm at the 30x40 working resolution).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import Capsule, capsule_clearance


@dataclass(frozen=True)
class BinSpec:
    """Rectangular deep bin; pose maps the bin frame (origin at the inner
    floor center, axes world-aligned by default) into the world."""

    inner_dims: np.ndarray = field(
        default_factory=lambda: np.array([1.06, 0.562, 0.46]))
    wall_thickness: float = 0.03
    pose: np.ndarray = field(default_factory=lambda: _default_bin_pose())

    def __post_init__(self):
        object.__setattr__(self, "inner_dims", np.asarray(self.inner_dims, dtype=float))
        object.__setattr__(self, "pose", np.asarray(self.pose, dtype=float))
        if np.any(self.inner_dims <= 0) or self.wall_thickness <= 0:
            raise ValueError("bin dimensions and wall thickness must be positive")

    @property
    def floor_z(self):
        return float(self.pose[2, 3])

    @property
    def rim_z(self):
        return self.floor_z + float(self.inner_dims[2])

    @property
    def center_xy(self):
        return self.pose[:2, 3].copy()

    def inner_rect(self):
        """(min_xy, max_xy) of the interior footprint."""
        half = 0.5 * self.inner_dims[:2]
        return self.center_xy - half, self.center_xy + half

    def outer_rect(self):
        lo, hi = self.inner_rect()
        return lo - self.wall_thickness, hi + self.wall_thickness


def _default_bin_pose():
    T = np.eye(4)
    T[:3, 3] = [0.48, 0.0, -0.36]
    return T


class HeightMap:
    """Grid of column-top heights over a square-cell footprint."""

    def __init__(self, heights, cell_size, origin, z0):
        heights = np.asarray(heights, dtype=float)
        if heights.ndim != 2:
            raise ValueError("heights must be a 2-D grid")
        if cell_size <= 0:
            raise ValueError("cell size must be positive")
        if np.any(heights < z0 - 1e-12):
            raise ValueError("cell heights must not drop below the world bottom z0")
        self.heights = heights
        self.cell_size = float(cell_size)
        self.origin = np.asarray(origin, dtype=float)
        self.z0 = float(z0)

    @property
    def shape(self):
        return self.heights.shape

    @property
    def capsule_radius(self):
        """Radius covering a square cell: half the cell diagonal."""
        return 0.5 * np.sqrt(2.0) * self.cell_size

    def cell_centers(self):
        h, w = self.shape
        xs = self.origin[0] + (np.arange(w) + 0.5) * self.cell_size
        ys = self.origin[1] + (np.arange(h) + 0.5) * self.cell_size
        return xs, ys

    def copy(self, heights=None):
        return HeightMap(self.heights.copy() if heights is None else heights,
                         self.cell_size, self.origin, self.z0)

    def cell_index(self, x, y):
        j = int(np.floor((x - self.origin[0]) / self.cell_size))
        i = int(np.floor((y - self.origin[1]) / self.cell_size))
        return i, j

    def save(self, path):
        h, w = self.shape
        with open(path, "w") as f:
            f.write(f"{h} {w} {self.cell_size!r} {float(self.origin[0])!r} "
                    f"{float(self.origin[1])!r} {self.z0!r}\n")
            for row in self.heights:
                f.write(" ".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            h, w, cell, ox, oy, z0 = f.readline().split()
            heights = np.loadtxt(f, ndmin=2)
        heights = heights.reshape(int(h), int(w))
        return cls(heights, float(cell), [float(ox), float(oy)], float(z0))


def grid_for_bin(bin_spec: BinSpec, rows=30, cols=40, z0=-1.0):
    """Square-cell grid geometry covering the bin's outer footprint,
    centered on the bin. Returns (cell_size, origin)."""
    lo, hi = bin_spec.outer_rect()
    extent = hi - lo
    cell = max(extent[0] / cols, extent[1] / rows)
    center = 0.5 * (lo + hi)
    origin = center - 0.5 * cell * np.array([cols, rows])
    return cell, origin


def from_depth(depth, intrinsics, camera_pose, cell_size, origin, shape, z0,
               floor_height):
    """Back-project a depth image and bin the points into a height map.

    Each valid pixel becomes a world point; a cell's height is the max z of
    its points, cells with no points get the bin-floor height.
    """
    depth = np.asarray(depth, dtype=float)
    K = np.asarray(intrinsics, dtype=float)
    T = np.asarray(camera_pose, dtype=float)
    valid = np.isfinite(depth) & (depth > 0)
    if not np.any(valid):
        raise ValueError("empty depth input")
    h_img, w_img = depth.shape
    us, vs = np.meshgrid(np.arange(w_img), np.arange(h_img))
    u = us[valid].ravel()
    v = vs[valid].ravel()
    d = depth[valid].ravel()
    rays = np.linalg.inv(K) @ np.vstack([u + 0.5, v + 0.5, np.ones_like(d)])
    pts_cam = rays * d  # z-depth convention
    pts = (T[:3, :3] @ pts_cam).T + T[:3, 3]

    rows, cols = shape
    j = np.floor((pts[:, 0] - origin[0]) / cell_size).astype(int)
    i = np.floor((pts[:, 1] - origin[1]) / cell_size).astype(int)
    keep = (i >= 0) & (i < rows) & (j >= 0) & (j < cols)
    heights = np.full((rows, cols), floor_height, dtype=float)
    np.maximum.at(heights, (i[keep], j[keep]), pts[keep, 2])
    heights = np.maximum(heights, z0)
    return HeightMap(heights, cell_size, origin, z0)


def downsample(hm: HeightMap, out_h, out_w) -> HeightMap:
    """Max-pool to (out_h, out_w); output dims must tile the input dims."""
    h, w = hm.shape
    if out_h > h or out_w > w:
        raise ValueError("output dims larger than input")
    if h % out_h or w % out_w:
        raise ValueError("output dims must divide input dims")
    bh, bw = h // out_h, w // out_w
    if bh != bw:
        raise ValueError("pooling blocks must be square to keep square cells")
    pooled = hm.heights.reshape(out_h, bh, out_w, bw).max(axis=(1, 3))
    return HeightMap(pooled, hm.cell_size * bh, hm.origin, hm.z0)


def to_capsules(hm: HeightMap):
    """One vertical capsule per cell, cylindrical section from z0 to z_ij."""
    r = hm.capsule_radius
    xs, ys = hm.cell_centers()
    out = []
    for i, y in enumerate(ys):
        for j, x in enumerate(xs):
            out.append(Capsule([x, y, hm.z0], [x, y, hm.heights[i, j]], r))
    return out


def thicken_walls(hm: HeightMap, bin_spec: BinSpec, pad_cells=2) -> HeightMap:
    """Raise cells within pad_cells inside the wall lines to wall-top height,
    so carving a box resting against a wall cannot open the wall."""
    if pad_cells < 0:
        raise ValueError("pad_cells must be >= 0")
    if pad_cells == 0:
        return hm.copy()
    lo_in, hi_in = bin_spec.inner_rect()
    pad = pad_cells * hm.cell_size
    xs, ys = hm.cell_centers()
    X, Y = np.meshgrid(xs, ys)
    interior = ((X > lo_in[0]) & (X < hi_in[0]) & (Y > lo_in[1]) & (Y < hi_in[1]))
    core = ((X > lo_in[0] + pad) & (X < hi_in[0] - pad)
            & (Y > lo_in[1] + pad) & (Y < hi_in[1] - pad))
    band = interior & ~core
    heights = hm.heights.copy()
    heights[band] = np.maximum(heights[band], bin_spec.rim_z)
    return hm.copy(heights)


def protected_mask(hm: HeightMap, bin_spec: BinSpec, pad_cells=2):
    """Boolean mask of the solid border that carving must not open: every
    cell outside the interior footprint (the walls themselves) plus the
    pad band raised by thicken_walls."""
    lo_in, hi_in = bin_spec.inner_rect()
    pad = pad_cells * hm.cell_size
    xs, ys = hm.cell_centers()
    X, Y = np.meshgrid(xs, ys)
    core = ((X > lo_in[0] + pad) & (X < hi_in[0] - pad)
            & (Y > lo_in[1] + pad) & (Y < hi_in[1] - pad))
    return ~core


def carve(hm: HeightMap, box_capsule: Capsule, tol=1e-6, protect=None) -> HeightMap:
    """Lower cells whose capsule intersects the grasped-box capsule until
    they no longer intersect; never raises a cell.

    Cells flagged in the optional protect mask are left untouched, so a
    box resting against a wall cannot open the wall; its grasp is instead
    reported as infeasible by the clearance check downstream.
    """
    r = hm.capsule_radius
    xs, ys = hm.cell_centers()
    heights = hm.heights.copy()
    # candidate cells from the box capsule's xy bounding box
    margin = box_capsule.radius + r
    lo = np.minimum(box_capsule.p0[:2], box_capsule.p1[:2]) - margin
    hi = np.maximum(box_capsule.p0[:2], box_capsule.p1[:2]) + margin
    for i, y in enumerate(ys):
        if y < lo[1] or y > hi[1]:
            continue
        for j, x in enumerate(xs):
            if x < lo[0] or x > hi[0]:
                continue
            if protect is not None and protect[i, j]:
                continue
            cell = Capsule([x, y, hm.z0], [x, y, heights[i, j]], r)
            if capsule_clearance(cell, box_capsule) >= 0.0:
                continue
            bottom = Capsule([x, y, hm.z0], [x, y, hm.z0], r)
            if capsule_clearance(bottom, box_capsule) < 0.0:
                heights[i, j] = hm.z0  # cannot separate; carve to the bottom
                continue
            lo_z, hi_z = hm.z0, heights[i, j]
            while hi_z - lo_z > tol:
                mid = 0.5 * (lo_z + hi_z)
                c = Capsule([x, y, hm.z0], [x, y, mid], r)
                if capsule_clearance(c, box_capsule) >= 0.0:
                    lo_z = mid
                else:
                    hi_z = mid
            heights[i, j] = lo_z
    return hm.copy(heights)
