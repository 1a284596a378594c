import numpy as np
import pytest

from bomp.trajectory import State, Trajectory, check_limits, from_arrays, step
from bomp.robot import Limits


def zeros():
    return np.zeros(6)


def random_trajectory(rng, horizon=8, t_step=0.1):
    """Build a dynamically consistent trajectory by integrating random jerks."""
    x = State(rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6))
    states = [x]
    for _ in range(horizon):
        x = step(x, rng.uniform(-5, 5, 6), t_step)
        states.append(x)
    return Trajectory(states, t_step)


def test_step_zero_jerk_at_rest():
    x = State(np.arange(6.0), zeros(), zeros())
    y = step(x, zeros(), 0.5)
    np.testing.assert_allclose(y.q, x.q)
    np.testing.assert_allclose(y.qd, 0)
    np.testing.assert_allclose(y.qdd, 0)


def test_step_analytic_cubic():
    x = State(zeros(), zeros(), zeros())
    y = step(x, 6.0 * np.ones(6), 1.0)
    np.testing.assert_allclose(y.q, 1.0)
    np.testing.assert_allclose(y.qd, 3.0)
    np.testing.assert_allclose(y.qdd, 6.0)


def test_step_semigroup():
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = State(rng.normal(size=6), rng.normal(size=6), rng.normal(size=6))
        j = rng.normal(size=6)
        t = rng.uniform(0.01, 1.0)
        a = step(step(x, j, t / 2), j, t / 2)
        b = step(x, j, t)
        np.testing.assert_allclose(a.q, b.q, atol=1e-12)
        np.testing.assert_allclose(a.qd, b.qd, atol=1e-12)
        np.testing.assert_allclose(a.qdd, b.qdd, atol=1e-12)


def test_interpolate_at_waypoints():
    traj = random_trajectory(np.random.default_rng(1))
    for k in range(traj.horizon + 1):
        x = traj.interpolate(k * traj.t_step)
        np.testing.assert_allclose(x.q, traj.states[k].q, atol=1e-10)
        np.testing.assert_allclose(x.qd, traj.states[k].qd, atol=1e-10)


def test_interpolate_zero_jerk_midpoint():
    x0 = State(zeros(), np.ones(6), zeros())
    x1 = step(x0, zeros(), 1.0)
    traj = Trajectory([x0, x1], 1.0)
    mid = traj.interpolate(0.5)
    np.testing.assert_allclose(mid.q, 0.5)
    np.testing.assert_allclose(mid.qd, 1.0)


def test_interpolate_matches_repeated_step():
    rng = np.random.default_rng(2)
    traj = random_trajectory(rng)
    for _ in range(1000):
        t = rng.uniform(0, traj.duration)
        k = min(int(t / traj.t_step), traj.horizon - 1)
        ref = step(traj.states[k], traj.jerks[k], t - k * traj.t_step)
        got = traj.interpolate(t)
        np.testing.assert_allclose(got.q, ref.q, atol=1e-10)
        np.testing.assert_allclose(got.qd, ref.qd, atol=1e-10)
        np.testing.assert_allclose(got.qdd, ref.qdd, atol=1e-10)


def test_interpolate_out_of_range():
    traj = random_trajectory(np.random.default_rng(3))
    with pytest.raises(ValueError):
        traj.interpolate(traj.duration + 0.1)
    with pytest.raises(ValueError):
        traj.interpolate(-0.1)


def test_interpolate_continuity_across_waypoints():
    traj = random_trajectory(np.random.default_rng(4))
    eps = 1e-10
    for k in range(1, traj.horizon):
        t = k * traj.t_step
        a, b = traj.interpolate(t - eps), traj.interpolate(t + eps)
        np.testing.assert_allclose(a.q, b.q, atol=1e-9)
        np.testing.assert_allclose(a.qd, b.qd, atol=1e-9)
        np.testing.assert_allclose(a.qdd, b.qdd, atol=1e-6)


def default_limits():
    return Limits(
        q_min=-2 * np.pi * np.ones(6), q_max=2 * np.pi * np.ones(6),
        v_max=np.pi * np.ones(6), a_max=8.0 * np.ones(6), j_max=80.0 * np.ones(6))


def test_check_limits_stationary():
    traj = Trajectory([State(zeros(), zeros(), zeros())] * 3, 0.1)
    rep = check_limits(traj, default_limits())
    assert rep.ok(tol=0.0)


def test_check_limits_velocity_violation():
    lim = default_limits()
    states = [State(zeros(), zeros(), zeros()),
              State(zeros(), 2 * lim.v_max, zeros()),
              State(zeros(), zeros(), zeros())]
    rep = check_limits(Trajectory(states, 0.1), lim)
    assert rep.velocity == pytest.approx(lim.v_max[0])
    assert not rep.ok()


def test_check_limits_matches_brute_force():
    rng = np.random.default_rng(5)
    lim = default_limits()
    for _ in range(20):
        traj = random_trajectory(rng)
        rep = check_limits(traj, lim)
        pos = vel = acc = jrk = 0.0
        for x in traj.states:
            pos = max(pos, float(np.max(np.maximum(lim.q_min - x.q, x.q - lim.q_max))))
            vel = max(vel, float(np.max(np.abs(x.qd) - lim.v_max)))
            acc = max(acc, float(np.max(np.abs(x.qdd) - lim.a_max)))
        for j in traj.jerks:
            jrk = max(jrk, float(np.max(np.abs(j) - lim.j_max)))
        assert rep.position == pytest.approx(max(pos, 0.0))
        assert rep.velocity == pytest.approx(max(vel, 0.0))
        assert rep.acceleration == pytest.approx(max(acc, 0.0))
        assert rep.jerk == pytest.approx(max(jrk, 0.0))


def test_resample_at_t_step_returns_waypoints():
    traj = random_trajectory(np.random.default_rng(6))
    out = traj.resample(traj.t_step)
    assert len(out) == traj.horizon + 1
    for got, ref in zip(out, traj.states):
        np.testing.assert_allclose(got.q, ref.q, atol=1e-10)


def test_resample_full_duration():
    traj = random_trajectory(np.random.default_rng(7))
    out = traj.resample(traj.duration)
    assert len(out) == 2
    np.testing.assert_allclose(out[0].q, traj.states[0].q)
    np.testing.assert_allclose(out[1].q, traj.states[-1].q)


def test_resample_matches_interpolate():
    traj = random_trajectory(np.random.default_rng(8))
    dt = 0.0371
    out = traj.resample(dt)
    for k, x in enumerate(out[:-1]):
        ref = traj.interpolate(k * dt)
        np.testing.assert_allclose(x.q, ref.q, atol=1e-10)


def test_dynamics_residual_of_integrated_trajectory():
    traj = random_trajectory(np.random.default_rng(9))
    assert traj.dynamics_residual() < 1e-9


def test_save_load_roundtrip(tmp_path):
    traj = random_trajectory(np.random.default_rng(10))
    p = tmp_path / "traj.json"
    traj.save(p)
    back = Trajectory.load(p)
    assert back.t_step == traj.t_step
    np.testing.assert_allclose(back.positions(), traj.positions())
    np.testing.assert_allclose(back.velocities(), traj.velocities())
    np.testing.assert_allclose(back.accelerations(), traj.accelerations())


def test_from_arrays():
    rng = np.random.default_rng(11)
    q, qd, qdd = rng.normal(size=(3, 4, 6))
    traj = from_arrays(q, qd, qdd, 0.2)
    assert traj.horizon == 3
    np.testing.assert_allclose(traj.positions(), q)
