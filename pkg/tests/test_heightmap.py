import numpy as np
import pytest

from bomp.geom import Capsule, capsule_clearance
from bomp.heightmap import (
    BinSpec,
    HeightMap,
    carve,
    downsample,
    from_depth,
    grid_for_bin,
    protected_mask,
    thicken_walls,
    to_capsules,
)


def overhead_camera(height=1.5, fx=300.0, img=(48, 64)):
    """Camera looking straight down at the world origin."""
    h, w = img
    K = np.array([[fx, 0, w / 2], [0, fx, h / 2], [0, 0, 1.0]])
    T = np.eye(4)
    # camera z points down: rotate pi about x
    T[:3, :3] = np.array([[1, 0, 0], [0, -1, 0], [0, 0, -1.0]])
    T[:3, 3] = [0, 0, height]
    return K, T


def test_from_depth_flat_floor():
    K, T = overhead_camera()
    depth = np.full((48, 64), 1.5)
    hm = from_depth(depth, K, T, cell_size=0.02, origin=[-0.2, -0.2],
                    shape=(20, 20), z0=-1.0, floor_height=0.0)
    assert np.all(np.abs(hm.heights) < 1e-6)


def test_from_depth_cube_on_floor():
    K, T = overhead_camera()
    # pixels viewing the cube top (|x|,|y| < 0.05 at z=0.1) have depth 1.4
    depth = np.full((48, 64), 1.5)
    for v in range(48):
        for u in range(64):
            ray = np.linalg.inv(K) @ np.array([u + 0.5, v + 0.5, 1.0])
            # world xy at z=0.1 plane
            x, y = 1.4 * ray[0], -1.4 * ray[1]
            if abs(x) < 0.05 and abs(y) < 0.05:
                depth[v, u] = 1.4
    hm = from_depth(depth, K, T, cell_size=0.02, origin=[-0.2, -0.2],
                    shape=(20, 20), z0=-1.0, floor_height=0.0)
    xs, ys = hm.cell_centers()
    X, Y = np.meshgrid(xs, ys)
    inside = (np.abs(X) < 0.04) & (np.abs(Y) < 0.04)
    outside = (np.abs(X) > 0.07) | (np.abs(Y) > 0.07)
    assert np.all(np.abs(hm.heights[inside] - 0.1) < 1e-6)
    assert np.all(np.abs(hm.heights[outside]) < 1e-6)


def test_from_depth_matches_brute_force_binning():
    rng = np.random.default_rng(0)
    K, T = overhead_camera(img=(24, 32))
    depth = rng.uniform(1.0, 1.5, (24, 32))
    cell, origin, shape, floor = 0.05, np.array([-0.3, -0.3]), (12, 12), -0.5
    hm = from_depth(depth, K, T, cell, origin, shape, z0=-1.0, floor_height=floor)
    ref = np.full(shape, floor)
    for v in range(24):
        for u in range(32):
            ray = np.linalg.inv(K) @ np.array([u + 0.5, v + 0.5, 1.0])
            p_cam = ray * depth[v, u]
            p = T[:3, :3] @ p_cam + T[:3, 3]
            j = int(np.floor((p[0] - origin[0]) / cell))
            i = int(np.floor((p[1] - origin[1]) / cell))
            if 0 <= i < shape[0] and 0 <= j < shape[1]:
                ref[i, j] = max(ref[i, j], p[2])
    np.testing.assert_allclose(hm.heights, ref, atol=1e-12)


def test_from_depth_empty_input():
    K, T = overhead_camera()
    with pytest.raises(ValueError, match="empty depth"):
        from_depth(np.zeros((48, 64)), K, T, 0.02, [-0.2, -0.2], (20, 20),
                   z0=-1.0, floor_height=0.0)


def test_downsample_constant():
    hm = HeightMap(np.full((60, 80), 0.3), 0.01, [0, 0], -1.0)
    out = downsample(hm, 30, 40)
    assert np.all(out.heights == 0.3)
    assert out.cell_size == pytest.approx(0.02)


def test_downsample_spike():
    heights = np.zeros((480, 640))
    heights[133, 257] = 0.7
    hm = HeightMap(heights, 0.002, [0, 0], -1.0)
    out = downsample(hm, 30, 40)
    expect = np.zeros((30, 40))
    expect[133 // 16, 257 // 16] = 0.7
    np.testing.assert_allclose(out.heights, expect)


def test_downsample_composition():
    rng = np.random.default_rng(1)
    hm = HeightMap(rng.uniform(-0.3, 0.4, (120, 160)), 0.005, [0, 0], -1.0)
    once = downsample(hm, 30, 40)
    twice = downsample(downsample(hm, 60, 80), 30, 40)
    np.testing.assert_allclose(once.heights, twice.heights)


def test_downsample_conservative():
    rng = np.random.default_rng(2)
    hm = HeightMap(rng.uniform(-0.3, 0.4, (60, 80)), 0.01, [0, 0], -1.0)
    out = downsample(hm, 30, 40)
    blocks = hm.heights.reshape(30, 2, 40, 2).max(axis=(1, 3))
    np.testing.assert_array_equal(out.heights, blocks)


def test_downsample_rejects_upsampling():
    hm = HeightMap(np.zeros((30, 40)), 0.01, [0, 0], -1.0)
    with pytest.raises(ValueError):
        downsample(hm, 60, 80)


def test_to_capsules_formula_and_count():
    hm = HeightMap(np.array([[0.3]]), 0.02, [0.1, 0.2], -1.0)
    caps = to_capsules(hm)
    assert len(caps) == 1
    c = caps[0]
    np.testing.assert_allclose(c.p0, [0.11, 0.21, -1.0])
    np.testing.assert_allclose(c.p1, [0.11, 0.21, 0.3])
    assert c.radius == pytest.approx(np.sqrt(2) * 0.01)

    rng = np.random.default_rng(3)
    hm2 = HeightMap(rng.uniform(-0.5, 0.5, (7, 9)), 0.03, [0, 0], -1.0)
    assert len(to_capsules(hm2)) == 63


def test_to_capsules_contains_column():
    rng = np.random.default_rng(4)
    hm = HeightMap(rng.uniform(-0.5, 0.5, (4, 4)), 0.025, [0, 0], -1.0)
    caps = to_capsules(hm)
    xs, ys = hm.cell_centers()
    for i in range(4):
        for j in range(4):
            c = caps[i * 4 + j]
            half = hm.cell_size / 2
            pts = np.column_stack([
                rng.uniform(xs[j] - half, xs[j] + half, 200),
                rng.uniform(ys[i] - half, ys[i] + half, 200),
                rng.uniform(hm.z0, hm.heights[i, j], 200),
            ])
            seg = c.p1 - c.p0
            s = np.clip((pts - c.p0) @ seg / (seg @ seg), 0, 1)
            d = np.linalg.norm(pts - (c.p0 + s[:, None] * seg), axis=1)
            assert np.all(d <= c.radius + 1e-12)


@pytest.fixture
def bin_spec():
    return BinSpec()


def empty_bin_map(bin_spec, rows=30, cols=40):
    cell, origin = grid_for_bin(bin_spec, rows, cols)
    hm = HeightMap(np.full((rows, cols), -1.0), cell, origin, -1.0)
    xs, ys = hm.cell_centers()
    X, Y = np.meshgrid(xs, ys)
    lo_i, hi_i = bin_spec.inner_rect()
    lo_o, hi_o = bin_spec.outer_rect()
    inner = (X > lo_i[0]) & (X < hi_i[0]) & (Y > lo_i[1]) & (Y < hi_i[1])
    outer = (X > lo_o[0]) & (X < hi_o[0]) & (Y > lo_o[1]) & (Y < hi_o[1])
    heights = hm.heights.copy()
    heights[outer] = bin_spec.rim_z
    heights[inner] = bin_spec.floor_z
    return hm.copy(heights)


def test_thicken_pad0_identity(bin_spec):
    hm = empty_bin_map(bin_spec)
    out = thicken_walls(hm, bin_spec, 0)
    np.testing.assert_array_equal(out.heights, hm.heights)


def test_thicken_pad1_band(bin_spec):
    hm = empty_bin_map(bin_spec)
    out = thicken_walls(hm, bin_spec, 1)
    changed = out.heights != hm.heights
    assert np.all(out.heights[changed] == bin_spec.rim_z)
    assert changed.sum() > 0
    # changed cells hug the interior perimeter: all within one cell of a wall
    xs, ys = hm.cell_centers()
    X, Y = np.meshgrid(xs, ys)
    lo_i, hi_i = bin_spec.inner_rect()
    dist_to_wall = np.minimum.reduce([
        X - lo_i[0], hi_i[0] - X, Y - lo_i[1], hi_i[1] - Y])
    assert np.all(dist_to_wall[changed] <= hm.cell_size + 1e-9)
    # interior core untouched
    core = dist_to_wall > 2 * hm.cell_size
    np.testing.assert_array_equal(out.heights[core], hm.heights[core])


def test_thicken_never_lowers(bin_spec):
    rng = np.random.default_rng(5)
    hm = empty_bin_map(bin_spec)
    noisy = hm.copy(hm.heights + rng.uniform(0, 0.2, hm.shape))
    out = thicken_walls(noisy, bin_spec, 2)
    assert np.all(out.heights >= noisy.heights - 1e-12)


def test_carve_above_everything_is_identity(bin_spec):
    hm = empty_bin_map(bin_spec)
    cap = Capsule([0.48, 0, 2.0], [0.6, 0, 2.0], 0.05)
    out = carve(hm, cap)
    np.testing.assert_array_equal(out.heights, hm.heights)


def test_carve_vertical_capsule_over_cell(bin_spec):
    hm = empty_bin_map(bin_spec)
    xs, ys = hm.cell_centers()
    i, j = 15, 20
    x, y = xs[j], ys[i]
    heights = hm.heights.copy()
    heights[i, j] = 0.0  # a column tall enough to hit the capsule
    hm = hm.copy(heights)
    cap = Capsule([x, y, -0.2], [x, y, 0.3], 0.04)
    out = carve(hm, cap)
    expect = -0.2 - 0.04 - hm.capsule_radius
    assert out.heights[i, j] == pytest.approx(expect, abs=1e-6)


def test_carve_defining_property_and_idempotence(bin_spec):
    rng = np.random.default_rng(6)
    hm = empty_bin_map(bin_spec)
    hm = hm.copy(hm.heights + np.where(
        rng.uniform(size=hm.shape) < 0.5, rng.uniform(0, 0.4, hm.shape), 0.0))
    for _ in range(10):
        p0 = np.array([rng.uniform(0.2, 0.8), rng.uniform(-0.2, 0.2),
                       rng.uniform(-0.3, 0.2)])
        cap = Capsule(p0, p0 + rng.uniform(-0.1, 0.1, 3), rng.uniform(0.03, 0.1))
        out = carve(hm, cap)
        assert np.all(out.heights <= hm.heights + 1e-12)  # never raised
        for cell in to_capsules(out):
            assert capsule_clearance(cell, cap) >= -1e-6
        again = carve(out, cap)
        np.testing.assert_allclose(again.heights, out.heights, atol=2e-6)


def test_carve_after_thicken_never_lowers_wall_cells(bin_spec):
    # a box resting flush against the wall must not carve through it
    rng = np.random.default_rng(7)
    hm = empty_bin_map(bin_spec)
    thick = thicken_walls(hm, bin_spec, 2)
    keep = protected_mask(hm, bin_spec, 2)
    lo_i, hi_i = bin_spec.inner_rect()
    wall_band = (hm.heights == bin_spec.rim_z)
    for _ in range(10):
        r = rng.uniform(0.04, 0.09)
        x = lo_i[0] + r  # flush against the -x wall
        y = rng.uniform(lo_i[1] + 0.1, hi_i[1] - 0.1)
        z = bin_spec.floor_z + r
        cap = Capsule([x, y, z], [x, y + rng.uniform(0, 0.1), z], r)
        out = carve(thick, cap, protect=keep)
        assert np.all(out.heights[wall_band] >= hm.heights[wall_band] - 1e-9)
        # without protection this box really would open the wall
        naive = carve(thick, cap)
        assert np.any(naive.heights[wall_band] < hm.heights[wall_band] - 1e-9)


def test_save_load_roundtrip(tmp_path, bin_spec):
    hm = empty_bin_map(bin_spec)
    p = tmp_path / "map.txt"
    hm.save(p)
    back = HeightMap.load(p)
    np.testing.assert_array_equal(back.heights, hm.heights)
    assert back.cell_size == hm.cell_size
    np.testing.assert_array_equal(back.origin, hm.origin)
    assert back.z0 == hm.z0


def test_heightmap_validation():
    with pytest.raises(ValueError):
        HeightMap(np.full((2, 2), -2.0), 0.01, [0, 0], -1.0)
    with pytest.raises(ValueError):
        HeightMap(np.zeros((2, 2)), 0.0, [0, 0], -1.0)
