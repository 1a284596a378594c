import numpy as np
import pytest

from bomp.geom import Capsule
from bomp.robot import (
    BOX_CANDIDATES,
    FACES,
    KinematicModel,
    Limits,
    attach_box,
    default_limits,
    elbow_is_down,
    fk,
    fk_batch,
    fk_frames,
    ik,
    jacobian_position,
    select_elbow_down,
)


@pytest.fixture(scope="module")
def model():
    return KinematicModel()


def dh_oracle(theta, a, d, alpha):
    """Independent 4x4 construction via explicit elementary transforms."""
    def rz(t):
        return np.array([[np.cos(t), -np.sin(t), 0, 0],
                         [np.sin(t), np.cos(t), 0, 0],
                         [0, 0, 1, 0], [0, 0, 0, 1]])

    def rx(t):
        return np.array([[1, 0, 0, 0],
                         [0, np.cos(t), -np.sin(t), 0],
                         [0, np.sin(t), np.cos(t), 0], [0, 0, 0, 1]])

    tz = np.eye(4); tz[2, 3] = d
    tx = np.eye(4); tx[0, 3] = a
    return rz(theta) @ tz @ tx @ rx(alpha)


def fk_oracle(model, q):
    T = np.eye(4)
    for i in range(6):
        a, d, alpha = model.dh[i]
        T = T @ dh_oracle(q[i], a, d, alpha)
    return T @ model.tool_transform


def test_fk_zero_config_matches_matrix_product(model):
    q = np.zeros(6)
    pose, _ = fk(model, q)
    np.testing.assert_allclose(pose, fk_oracle(model, q), atol=1e-12)


def test_fk_random_matches_matrix_product(model):
    rng = np.random.default_rng(0)
    for _ in range(50):
        q = rng.uniform(-np.pi, np.pi, 6)
        pose, _ = fk(model, q)
        np.testing.assert_allclose(pose, fk_oracle(model, q), atol=1e-10)


def test_fk_joint1_pi_flips_xy(model):
    q = np.zeros(6)
    p0 = fk(model, q)[0][:3, 3]
    q[0] = np.pi
    p1 = fk(model, q)[0][:3, 3]
    np.testing.assert_allclose(p1[:2], -p0[:2], atol=1e-12)
    assert p1[2] == pytest.approx(p0[2])


def test_jacobian_matches_finite_differences(model):
    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(20):
        q = rng.uniform(-np.pi, np.pi, 6)
        tip = fk(model, q)[0][:3, 3]
        J = jacobian_position(model, q, tip)
        J_fd = np.zeros((3, 6))
        for i in range(6):
            qp, qm = q.copy(), q.copy()
            qp[i] += h
            qm[i] -= h
            J_fd[:, i] = (fk(model, qp)[0][:3, 3] - fk(model, qm)[0][:3, 3]) / (2 * h)
        np.testing.assert_allclose(J, J_fd, atol=1e-5)


def test_fk_batch_matches_scalar(model):
    rng = np.random.default_rng(2)
    Q = rng.uniform(-np.pi, np.pi, (40, 6))
    flange, tip, origins, axes = fk_batch(model, Q)
    for k in range(len(Q)):
        frames = fk_frames(model, Q[k])
        np.testing.assert_allclose(flange[k], frames[6], atol=1e-12)
        np.testing.assert_allclose(tip[k], frames[7], atol=1e-12)
        for i in range(7):
            np.testing.assert_allclose(origins[k, i], frames[i][:3, 3], atol=1e-12)
            np.testing.assert_allclose(axes[k, i], frames[i][:3, 2], atol=1e-12)


def test_ik_roundtrip_contains_original(model):
    rng = np.random.default_rng(3)
    found = 0
    for _ in range(100):
        q = rng.uniform(-np.pi, np.pi, 6)
        pose, _ = fk(model, q)
        sols = ik(model, pose)
        assert sols, f"no IK solutions for q={q}"
        dists = [np.abs((s - q + np.pi) % (2 * np.pi) - np.pi).max() for s in sols]
        if min(dists) < 1e-6:
            found += 1
    # the original configuration should essentially always be recovered
    assert found >= 98


def test_ik_out_of_reach_empty(model):
    pose = np.eye(4)
    pose[:3, 3] = [2.0, 0.0, 0.5]
    assert ik(model, pose) == []


def test_ik_solutions_verified_by_fk(model):
    rng = np.random.default_rng(4)
    total = 0
    for _ in range(1000):
        q = rng.uniform(-np.pi, np.pi, 6)
        pose, _ = fk(model, q)
        for s in ik(model, pose):
            got, _ = fk(model, s)
            assert np.abs(got - pose).max() < 1e-8
            total += 1
    assert total > 0


def test_ik_solution_count_at_most_8(model):
    rng = np.random.default_rng(5)
    for _ in range(200):
        q = rng.uniform(-np.pi, np.pi, 6)
        pose, _ = fk(model, q)
        assert len(ik(model, pose)) <= 8


def test_select_elbow_down_picks_down_branch(model):
    rng = np.random.default_rng(6)
    picked = 0
    for _ in range(50):
        q = rng.uniform(-np.pi, np.pi, 6)
        pose, _ = fk(model, q)
        sols = ik(model, pose)
        branches = {elbow_is_down(model, s) for s in sols}
        choice = select_elbow_down(model, sols)
        if True in branches:
            assert choice is not None
            assert elbow_is_down(model, choice)
            picked += 1
        else:
            assert choice is None
    assert picked > 10  # both branches appear across random poses


def test_select_elbow_down_empty():
    assert select_elbow_down(KinematicModel(), []) is None


def test_select_elbow_down_only_up_branch(model):
    rng = np.random.default_rng(7)
    seen = False
    for _ in range(50):
        q = rng.uniform(-np.pi, np.pi, 6)
        pose, _ = fk(model, q)
        up_only = [s for s in ik(model, pose) if not elbow_is_down(model, s)]
        if up_only:
            assert select_elbow_down(model, up_only) is None
            seen = True
    assert seen


def capsule_contains(capsule, pts, tol=1e-9):
    seg = capsule.p1 - capsule.p0
    denom = float(seg @ seg)
    pts = np.atleast_2d(pts)
    if denom < 1e-18:
        d = np.linalg.norm(pts - capsule.p0, axis=1)
    else:
        s = np.clip((pts - capsule.p0) @ seg / denom, 0.0, 1.0)
        d = np.linalg.norm(pts - (capsule.p0 + s[:, None] * seg), axis=1)
    return np.all(d <= capsule.radius + tol)


def box_vertices(dims):
    h = 0.5 * np.asarray(dims)
    return np.array([[sx * h[0], sy * h[1], sz * h[2]]
                     for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])


def test_attach_box_4x4x2(model):
    dims = np.array([0.1016, 0.1016, 0.0508])
    box = attach_box(dims, "+z")
    assert box.capsule.radius == pytest.approx(0.5 * np.hypot(0.1016, 0.0508))
    # all 8 vertices inside the capsule (in the ee frame, via box_to_ee)
    verts_box = box_vertices(dims)
    R, t = box.box_to_ee[:3, :3], box.box_to_ee[:3, 3]
    verts_ee = verts_box @ R.T + t
    assert capsule_contains(box.capsule, verts_ee)
    # suction at the ee origin: box top face center coincides with tip
    np.testing.assert_allclose(t, [0, 0, dims[2] / 2], atol=1e-12)


def test_attach_box_cube():
    side = 0.08
    box = attach_box([side, side, side], "+x")
    assert box.capsule.radius == pytest.approx(0.5 * np.sqrt(2) * side)
    assert np.linalg.norm(box.capsule.p1 - box.capsule.p0) == pytest.approx(side)


def test_attach_box_random_containment():
    rng = np.random.default_rng(8)
    for _ in range(500):
        dims = rng.uniform(0.02, 0.3, 3)
        face = FACES[rng.integers(0, 6)]
        box = attach_box(dims, face)
        verts_box = box_vertices(dims)
        R, t = box.box_to_ee[:3, :3], box.box_to_ee[:3, 3]
        assert capsule_contains(box.capsule, verts_box @ R.T + t)


def test_attach_box_known_flag():
    for cand in BOX_CANDIDATES:
        assert attach_box(np.array(cand), "+z").known
    assert not attach_box([0.5, 0.4, 0.3], "+z").known


def test_attach_box_rejects_nonpositive():
    with pytest.raises(ValueError):
        attach_box([0.1, 0.0, 0.1], "+z")


def test_limits_validation():
    with pytest.raises(ValueError):
        Limits(q_min=np.ones(6), q_max=np.zeros(6), v_max=np.ones(6),
               a_max=np.ones(6), j_max=np.ones(6))
    lim = default_limits()
    assert lim.contains(np.zeros(6))
    assert not lim.contains(7.0 * np.ones(6))


def test_model_save_load_roundtrip(tmp_path, model):
    p = tmp_path / "robot.json"
    model.save(p)
    back = KinematicModel.load(p)
    np.testing.assert_allclose(back.dh, model.dh)
    np.testing.assert_allclose(back.tool_transform, model.tool_transform)
    assert len(back.tool_capsules) == len(model.tool_capsules)
    q = np.array([0.3, -1.0, 1.2, -0.5, 0.7, 0.1])
    np.testing.assert_allclose(fk(back, q)[0], fk(model, q)[0], atol=1e-12)
