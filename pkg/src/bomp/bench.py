"""Benchmark harness: scene preparation, verification oracle, planner
comparison suites, and CSV reporting.

Compute time is wall clock around the planning call only; scene generation,
rendering, and carving are excluded. Execution time is H * t_step for the
optimizer variants and the parameterized duration for the baselines. Success
in every aggregate is defined by the independent verification oracle, never
by the planner's own claim.
"""

import csv
import os
import time
from dataclasses import dataclass

import numpy as np

from .baselines import rrt_star, time_parameterize, up_over_down
from .geom import Capsule
from .heightmap import HeightMap, carve, protected_mask, thicken_walls
from .robot import NDOF, KinematicModel, attach_box, fk_frames, wrap_to_near
from .scenegen import (
    GOAL_CONFIGURATION,
    Scene,
    fill_bin,
    render_heightmap,
    select_grasp,
    select_target,
)
from .sqp import CollisionWorld, SqpParams, dense_clearances, optimize_tstep, sqp_solve
from .trajectory import Trajectory, check_limits
from .warmstart import predict_warmstart

# extra carve radius beyond the verification inflation (1 cm): the solver
# margin plus 2 mm of slack so the grasped box starts strictly clear
CARVE_EXTRA = 0.015
# pre-flight clearance inflation when filtering feasible scenes (solver
# inflation + margin; a start this tight is unsolvable anyway)
FEASIBLE_INFLATE = 0.013

PLANNERS = ("bomp", "bomp-cold", "bomp-nh", "bomp-t160",
            "uod", "rrt-1", "rrt-10")
STOCHASTIC = ("rrt-1", "rrt-10")
CSV_FIELDS = ("scene_id", "planner", "success", "reason", "compute_s",
              "exec_s", "total_s", "min_clearance", "limit_violations")


@dataclass
class TrialRecord:
    scene_id: int
    planner: str
    success: bool
    reason: str
    compute_s: float
    exec_s: float
    total_s: float
    min_clearance: float
    limit_violations: int


# ---------------------------------------------------------------------------
# scene pipeline


@dataclass
class PreparedScene:
    seed: int
    scene: Scene
    env: HeightMap           # wall-thickened, carved planning map
    plan: object             # GraspPlan
    qH: np.ndarray


def grasp_capsule_world(box, extra=CARVE_EXTRA) -> Capsule:
    """World-frame capsule of a box about to be grasped, inflated for
    carving. The capsule axis is a property of the box itself, so any
    face choice yields the same set; +z is used for construction."""
    g = attach_box(box.dims, "+z")
    tip = box.pose @ np.linalg.inv(g.box_to_ee)
    cap = g.capsule
    return Capsule(tip[:3, :3] @ cap.p0 + tip[:3, 3],
                   tip[:3, :3] @ cap.p1 + tip[:3, 3],
                   cap.radius + extra)


def build_environment(scene: Scene, target, noise=0.0,
                      noise_seed=None) -> HeightMap:
    """Wall-thickened height map with the target box carved away."""
    hm = render_heightmap(scene, noise=noise, noise_seed=noise_seed)
    thick = thicken_walls(hm, scene.bin)
    return carve(thick, grasp_capsule_world(scene.boxes[target]),
                 protect=protected_mask(thick, scene.bin))


def prepare_scene(seed, model=None, bin_spec=None) -> PreparedScene | None:
    """Generate, render, pick a target, carve, and select a grasp.

    None when the scene admits no feasible pick: no visible graspable face
    with a collision-free elbow-down IK solution, or a start configuration
    too tight for the solver-inflated capsules.
    """
    model = model or KinematicModel()
    scene = fill_bin(seed, bin_spec=bin_spec)
    sel = select_target(render_heightmap(scene), scene)
    if sel is None:
        return None
    target = sel[0]
    env = build_environment(scene, target)
    plan = select_grasp(scene, target, model, env)
    if plan is None:
        return None
    world = CollisionWorld(model, plan.grasped, env)
    if world.clearance(plan.q0[None, :], FEASIBLE_INFLATE)[0] < 0.0:
        return None
    qH = wrap_to_near(GOAL_CONFIGURATION, plan.q0, model.limits)
    return PreparedScene(int(seed), scene, env, plan, qH)


def feasible_seeds(count, start=0, model=None, bin_spec=None):
    """First `count` scene seeds at or above `start` with a feasible pick."""
    model = model or KinematicModel()
    out = []
    seed = int(start)
    while len(out) < count:
        if prepare_scene(seed, model, bin_spec=bin_spec) is not None:
            out.append(seed)
        seed += 1
    return out


# ---------------------------------------------------------------------------
# verification oracle


def verify(traj: Trajectory, env, robot, box, samples=500, inflate=0.01,
           include_jerk=True):
    """(collision-free-and-within-limits flag, min clearance, limit report).

    Dense sampling at `samples` per segment with capsules inflated by
    `inflate`; the flag requires clearance >= -1e-6 and a clean limit
    report. Baselines are checked with include_jerk=False since their
    parameterization never bounds jerk.
    """
    world = env if isinstance(env, CollisionWorld) else CollisionWorld(
        robot, box, env)
    clear = dense_clearances(traj, world, samples, inflate)
    min_clear = float(clear.min()) if clear.size else np.inf
    report = check_limits(traj, robot.limits)
    flag = min_clear >= -1e-6 and report.ok(tol=1e-6,
                                            include_jerk=include_jerk)
    return flag, min_clear, report


def _violation_count(report, tol=1e-6):
    kinds = (report.position, report.velocity, report.acceleration,
             report.jerk)
    return int(sum(v > tol for v in kinds))


# ---------------------------------------------------------------------------
# planner adapters


@dataclass
class PlanOutcome:
    success: bool
    trajectory: Trajectory | None
    reason: str
    exec_s: float


def _bomp_outcome(res):
    if not res.success:
        return PlanOutcome(False, None, res.reason, np.nan)
    traj = res.trajectory
    return PlanOutcome(True, traj, "success", traj.horizon * traj.t_step)


def plan_trial(planner, prep: PreparedScene, model, params=None,
               warm_model=None, rep_seed=0) -> PlanOutcome:
    """Run one planner on a prepared scene and return its outcome."""
    params = params or SqpParams()
    q0, qH = prep.plan.q0, prep.qH
    env, box = prep.env, prep.plan.grasped
    if planner in ("bomp", "bomp-nh"):
        if warm_model is None:
            raise ValueError(f"{planner} requires a trained model")
        g = box
        hm = prep.env if planner == "bomp" else None
        traj, t_pred = predict_warmstart(
            warm_model, hm, q0, qH, radius=g.capsule.radius,
            p0_ee=g.capsule.p0, p1_ee=g.capsule.p1)
        res = optimize_tstep(q0, qH, env, box, params=params, model=model,
                             warm=(traj, t_pred))
        return _bomp_outcome(res)
    if planner == "bomp-cold":
        res = optimize_tstep(q0, qH, env, box, params=params, model=model)
        return _bomp_outcome(res)
    if planner == "bomp-t160":
        res = sqp_solve(q0, qH, env, box, t_step=0.16, params=params,
                        model=model)
        return _bomp_outcome(res)
    if planner == "uod":
        goal_pose = fk_frames(model, qH)[NDOF + 1]
        res = up_over_down(q0, goal_pose, env, box, model,
                           bin_spec=prep.scene.bin)
        if not res.success:
            return PlanOutcome(False, None, res.reason, np.nan)
        return PlanOutcome(True, res.trajectory, "success",
                           res.trajectory.duration)
    if planner.startswith("rrt-"):
        budget = float(planner.split("-", 1)[1])
        res = rrt_star(q0, qH, env, box, model, budget_s=budget,
                       seed=rep_seed)
        if not res.success:
            return PlanOutcome(False, None, res.reason, np.nan)
        traj = time_parameterize(res.path, model.limits)
        return PlanOutcome(True, traj, "success", traj.duration)
    raise ValueError(f"unknown planner: {planner}")


# ---------------------------------------------------------------------------
# suite


@dataclass
class SuiteConfig:
    seeds: list                      # scene seeds to run (all of them)
    planners: tuple = PLANNERS
    reps: int = 3                    # repetitions for stochastic planners
    sqp_params: SqpParams = None
    warm_model: object = None
    bin_spec: object = None          # None = the default deep bin


def _run_once(planner, prep, model, cfg, rep_seed):
    t0 = time.perf_counter()
    out = plan_trial(planner, prep, model, params=cfg.sqp_params,
                     warm_model=cfg.warm_model, rep_seed=rep_seed)
    compute = time.perf_counter() - t0
    if not out.success:
        return TrialRecord(prep.seed, planner, False, out.reason, compute,
                           np.nan, np.nan, np.nan, 0)
    include_jerk = planner.startswith("bomp")
    flag, min_clear, report = verify(out.trajectory, prep.env, model,
                                     prep.plan.grasped,
                                     include_jerk=include_jerk)
    nviol = _violation_count(report)
    if not flag:
        return TrialRecord(prep.seed, planner, False, "verify-failed",
                           compute, np.nan, np.nan, min_clear, nviol)
    return TrialRecord(prep.seed, planner, True, "success", compute,
                       out.exec_s, compute + out.exec_s, min_clear, nviol)


def _average_reps(recs):
    """Collapse repetition records of a stochastic planner: majority-vote
    success, metrics averaged over the successful repetitions."""
    wins = [r for r in recs if r.success]
    if 2 * len(wins) <= len(recs):
        fail = wins[0] if wins else recs[0]
        reason = recs[0].reason if not recs[0].success else "unreliable"
        return TrialRecord(fail.scene_id, fail.planner, False, reason,
                           float(np.mean([r.compute_s for r in recs])),
                           np.nan, np.nan, np.nan, 0)
    return TrialRecord(
        wins[0].scene_id, wins[0].planner, True, "success",
        float(np.mean([r.compute_s for r in recs])),
        float(np.mean([r.exec_s for r in wins])),
        float(np.mean([r.total_s for r in wins])),
        float(min(r.min_clearance for r in wins)),
        int(max(r.limit_violations for r in wins)),
    )


def run_suite(cfg: SuiteConfig, model=None, progress=None):
    """All scene seeds crossed with all planners; failures are recorded,
    never raised. Stochastic planners run `reps` times per scene and the
    repetitions are averaged into one record."""
    model = model or KinematicModel()
    records = []
    for seed in cfg.seeds:
        prep = prepare_scene(seed, model, bin_spec=cfg.bin_spec)
        for planner in cfg.planners:
            if prep is None:
                records.append(TrialRecord(int(seed), planner, False,
                                           "infeasible-grasp", 0.0, np.nan,
                                           np.nan, np.nan, 0))
                continue
            if planner in STOCHASTIC:
                reps = [_run_once(planner, prep, model, cfg,
                                  rep_seed=1000 * seed + k)
                        for k in range(cfg.reps)]
                rec = _average_reps(reps)
            else:
                rec = _run_once(planner, prep, model, cfg, rep_seed=0)
            records.append(rec)
            if progress is not None:
                progress(rec)
    return records


# ---------------------------------------------------------------------------
# dataset generation


def dataset_params() -> SqpParams:
    """Cheaper solver settings for label generation. Labels still come from
    the full cold-start duration search and must pass the standard
    verification oracle before entering a dataset; only the search grid and
    per-solve effort are reduced."""
    p = SqpParams()
    p.resolution = 0.02
    p.samples_per_segment = 24
    p.stall_iterations = 4
    p.qp_max_iter = 6000
    p.max_doublings = 0
    return p


def scene_records(seed, model=None, params=None, max_picks=None,
                  noise=0.0, progress=None):
    """Emptying pick sequence for one scene: target, carve, grasp, cold
    solve, verify, record, remove the box, repeat. Unverifiable or
    infeasible picks are skipped; the box is removed either way."""
    from .warmstart import SceneRecord

    model = model or KinematicModel()
    params = params or dataset_params()
    scene = fill_bin(seed)
    out = []
    pick = 0
    while scene.boxes:
        sel = select_target(render_heightmap(scene), scene)
        if sel is None:
            break
        target = sel[0]
        pick += 1
        env = build_environment(scene, target, noise=noise,
                                noise_seed=1009 * seed + pick)
        plan = select_grasp(scene, target, model, env)
        if plan is not None:
            world = CollisionWorld(model, plan.grasped, env)
            if world.clearance(plan.q0[None, :], FEASIBLE_INFLATE)[0] >= 0.0:
                qH = wrap_to_near(GOAL_CONFIGURATION, plan.q0, model.limits)
                res = optimize_tstep(plan.q0, qH, env, plan.grasped,
                                     params=params, model=model)
                if res.success:
                    flag, _, _ = verify(res.trajectory, env, model,
                                        plan.grasped)
                    if flag:
                        cap = plan.grasped.capsule
                        out.append(SceneRecord(
                            env.heights, plan.q0, qH, cap.radius,
                            cap.p0, cap.p1, res.trajectory.positions(),
                            res.t_step))
                        if progress is not None:
                            progress(seed, len(out), res.t_step)
        scene = Scene(scene.bin,
                      [b for i, b in enumerate(scene.boxes) if i != target],
                      scene.seed)
        if max_picks is not None and len(out) >= max_picks:
            break
    return out


# ---------------------------------------------------------------------------
# reporting


SUMMARY_FIELDS = ("Planner", "N", "Success Rate", "Exec. Time (s)",
                  "Exec. Std", "Compute Time (s)", "Compute Std",
                  "Total Time (s)", "Total Std")


def aggregate(records):
    """Per-planner Table-style aggregates; only successes enter the time
    columns. Standard deviations use the population convention, so a
    single sample reports 0.0."""
    rows = []
    for planner in sorted({r.planner for r in records}):
        recs = [r for r in records if r.planner == planner]
        wins = [r for r in recs if r.success]
        row = {"Planner": planner, "N": len(recs),
               "Success Rate": len(wins) / len(recs)}
        for label, std_label, key in (
                ("Exec. Time (s)", "Exec. Std", "exec_s"),
                ("Compute Time (s)", "Compute Std", "compute_s"),
                ("Total Time (s)", "Total Std", "total_s")):
            vals = np.array([getattr(r, key) for r in wins], dtype=float)
            if vals.size:
                row[label] = float(vals.mean())
                row[std_label] = float(vals.std())
            else:
                row[label] = ""
                row[std_label] = ""
        rows.append(row)
    return rows


def report(records, out_dir):
    """Write trials.csv (one row per trial, fixed column order) and
    summary.csv (per-planner aggregates). Ordering is deterministic:
    trials keep insertion order, summary sorts by planner id."""
    if not records:
        raise ValueError("no records to report")
    os.makedirs(out_dir, exist_ok=True)
    trials = os.path.join(out_dir, "trials.csv")
    with open(trials, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_FIELDS)
        for r in records:
            w.writerow([r.scene_id, r.planner, int(r.success), r.reason,
                        repr(float(r.compute_s)), repr(float(r.exec_s)),
                        repr(float(r.total_s)), repr(float(r.min_clearance)),
                        r.limit_violations])
    summary = os.path.join(out_dir, "summary.csv")
    with open(summary, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        for row in aggregate(records):
            w.writerow(row)
    return trials, summary


def parse_trials(path):
    """Inverse of the trials.csv writer."""
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(TrialRecord(
                int(row["scene_id"]), row["planner"],
                bool(int(row["success"])), row["reason"],
                float(row["compute_s"]), float(row["exec_s"]),
                float(row["total_s"]), float(row["min_clearance"]),
                int(row["limit_violations"])))
    return out
