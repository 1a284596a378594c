"""Discrete constant-jerk trajectory representation.

A trajectory stores H+1 states (q, qd, qdd) separated by a uniform t_step.
The per-segment jerk is derived from the stored accelerations, so the
position/velocity update equations are meaningful consistency checks rather
than tautologies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

NDOF = 6


@dataclass(frozen=True)
class State:
    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray

    def __post_init__(self):
        for name in ("q", "qd", "qdd"):
            v = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"non-finite entries in {name}")
            object.__setattr__(self, name, v)


def step(x: State, jerk, t_step: float) -> State:
    """Integrate one constant-jerk interval of length t_step."""
    j = np.asarray(jerk, dtype=float)
    t = float(t_step)
    q = x.q + x.qd * t + 0.5 * x.qdd * t**2 + (1.0 / 6.0) * j * t**3
    qd = x.qd + x.qdd * t + 0.5 * j * t**2
    qdd = x.qdd + j * t
    return State(q, qd, qdd)


class Trajectory:
    """H+1 states with uniform segment duration t_step."""

    def __init__(self, states, t_step):
        if t_step <= 0.0:
            raise ValueError("t_step must be positive")
        if len(states) < 2:
            raise ValueError("a trajectory needs at least two states")
        self.states = list(states)
        self.t_step = float(t_step)

    @property
    def horizon(self):
        return len(self.states) - 1

    @property
    def duration(self):
        return self.horizon * self.t_step

    @property
    def jerks(self):
        """Per-segment jerk derived from consecutive accelerations."""
        qdd = np.array([x.qdd for x in self.states])
        return (qdd[1:] - qdd[:-1]) / self.t_step

    def positions(self):
        return np.array([x.q for x in self.states])

    def velocities(self):
        return np.array([x.qd for x in self.states])

    def accelerations(self):
        return np.array([x.qdd for x in self.states])

    def dynamics_residual(self):
        """Max violation of the constant-jerk update equations."""
        jerks = self.jerks
        worst = 0.0
        for t in range(self.horizon):
            pred = step(self.states[t], jerks[t], self.t_step)
            nxt = self.states[t + 1]
            worst = max(
                worst,
                np.abs(pred.q - nxt.q).max(),
                np.abs(pred.qd - nxt.qd).max(),
                np.abs(pred.qdd - nxt.qdd).max(),
            )
        return worst

    def interpolate(self, t):
        """State at time t via the segment's constant-jerk closed form."""
        if t < -1e-12 or t > self.duration + 1e-12:
            raise ValueError(f"t={t} outside [0, {self.duration}]")
        t = min(max(t, 0.0), self.duration)
        k = min(int(t / self.t_step), self.horizon - 1)
        dt = t - k * self.t_step
        return step(self.states[k], self.jerks[k], dt)

    def resample(self, dt):
        """States at t = 0, dt, 2dt, ... clamped to the final state."""
        if dt <= 0.0:
            raise ValueError("dt must be positive")
        out = []
        t = 0.0
        while t < self.duration - 1e-12:
            out.append(self.interpolate(t))
            t += dt
        out.append(self.states[-1])
        return out

    def save(self, path):
        data = {
            "H": self.horizon,
            "t_step": self.t_step,
            "states": [
                {"q": x.q.tolist(), "qd": x.qd.tolist(), "qdd": x.qdd.tolist()}
                for x in self.states
            ],
        }
        with open(path, "w") as f:
            json.dump(data, f, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            data = json.load(f)
        states = [State(s["q"], s["qd"], s["qdd"]) for s in data["states"]]
        if len(states) != data["H"] + 1:
            raise ValueError("state count does not match header H")
        return cls(states, data["t_step"])


class LimitReport:
    """Maximum violation per constraint family; zeros iff within limits."""

    def __init__(self, position, velocity, acceleration, jerk):
        self.position = float(position)
        self.velocity = float(velocity)
        self.acceleration = float(acceleration)
        self.jerk = float(jerk)

    def ok(self, tol=1e-6, include_jerk=True):
        worst = max(self.position, self.velocity, self.acceleration)
        if include_jerk:
            worst = max(worst, self.jerk)
        return worst <= tol

    def __repr__(self):
        return (f"LimitReport(position={self.position:.3g}, velocity={self.velocity:.3g}, "
                f"acceleration={self.acceleration:.3g}, jerk={self.jerk:.3g})")


def check_limits(traj: Trajectory, limits) -> LimitReport:
    """Max violation of position/velocity/acceleration limits over waypoints
    and of jerk limits over segments."""
    q = traj.positions()
    qd = traj.velocities()
    qdd = traj.accelerations()
    j = traj.jerks
    pos = np.maximum(limits.q_min - q, q - limits.q_max).max()
    vel = (np.abs(qd) - limits.v_max).max()
    acc = (np.abs(qdd) - limits.a_max).max()
    jrk = (np.abs(j) - limits.j_max).max() if len(j) else -np.inf
    return LimitReport(max(pos, 0.0), max(vel, 0.0), max(acc, 0.0), max(jrk, 0.0))


def from_arrays(q, qd, qdd, t_step) -> Trajectory:
    states = [State(q[t], qd[t], qdd[t]) for t in range(len(q))]
    return Trajectory(states, t_step)


def stationary(q, horizon, t_step) -> Trajectory:
    z = np.zeros(NDOF)
    return Trajectory([State(q, z, z) for _ in range(horizon + 1)], t_step)
