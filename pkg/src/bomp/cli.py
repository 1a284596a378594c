"""Command line entry points: benchmark suites, trajectory verification,
dataset generation, and model training."""

import argparse
import sys
import time

import numpy as np


def _add_bench(sub):
    p = sub.add_parser("bench", help="planner comparison suites")
    s = p.add_subparsers(dest="bench_cmd", required=True)

    run = s.add_parser("run", help="run planners over seeded scenes")
    run.add_argument("--scenes", type=int, default=10,
                     help="number of scene seeds")
    run.add_argument("--seed", type=int, default=0, help="first scene seed")
    run.add_argument("--planners", default="bomp-cold,uod,rrt-1",
                     help="comma-separated planner ids")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--model", default=None,
                     help="trained model file (required by bomp, bomp-nh)")
    run.add_argument("--reps", type=int, default=3,
                     help="repetitions for stochastic planners")
    run.add_argument("--feasible-only", action="store_true",
                     help="scan for seeds with a feasible pick instead of "
                          "using consecutive seeds")

    ver = s.add_parser("verify", help="verify a saved trajectory")
    ver.add_argument("--traj", required=True, help="trajectory file")
    ver.add_argument("--scene", required=True, help="scene file")


def _add_dataset(sub):
    p = sub.add_parser("dataset", help="training data")
    s = p.add_subparsers(dest="dataset_cmd", required=True)
    gen = s.add_parser("gen", help="generate labeled records")
    gen.add_argument("--count", type=int, default=2000,
                     help="records to generate")
    gen.add_argument("--seed", type=int, default=0, help="first scene seed")
    gen.add_argument("--scenes", type=int, default=None,
                     help="cap on scene seeds consumed")
    gen.add_argument("--noise", type=float, default=0.0,
                     help="height map depth noise amplitude (m), "
                          "robustness experiments only")
    gen.add_argument("--out", required=True, help="output .npz file")
    gen.add_argument("--checkpoint-every", type=int, default=1,
                     help="rewrite the output every N scenes")


def _add_model(sub):
    p = sub.add_parser("model", help="warm-start model")
    s = p.add_subparsers(dest="model_cmd", required=True)

    tr = s.add_parser("train", help="train on a generated dataset")
    tr.add_argument("--data", required=True, help="dataset .npz file")
    tr.add_argument("--out", required=True, help="model output file")
    tr.add_argument("--epochs", type=int, default=60)
    tr.add_argument("--batch-size", type=int, default=64)
    tr.add_argument("--learning-rate", type=float, default=1e-3)
    tr.add_argument("--seed", type=int, default=0)

    ev = s.add_parser("eval", help="held-out prediction error")
    ev.add_argument("--data", required=True, help="dataset .npz file")
    ev.add_argument("--model", required=True, help="trained model file")


def _bench_run(args):
    from .bench import SuiteConfig, feasible_seeds, report, run_suite
    from .robot import KinematicModel

    model = KinematicModel()
    planners = tuple(p.strip() for p in args.planners.split(",") if p.strip())
    warm_model = None
    if any(p in ("bomp", "bomp-nh") for p in planners):
        if args.model is None:
            sys.exit("bomp/bomp-nh need --model")
        from .warmstart import WarmStartModel
        warm_model = WarmStartModel.load(args.model)
    if args.feasible_only:
        seeds = feasible_seeds(args.scenes, start=args.seed, model=model)
    else:
        seeds = list(range(args.seed, args.seed + args.scenes))
    cfg = SuiteConfig(seeds=seeds, planners=planners, reps=args.reps,
                      warm_model=warm_model)

    def progress(rec):
        print(f"scene {rec.scene_id:5d}  {rec.planner:10s} "
              f"{'ok' if rec.success else rec.reason:20s} "
              f"compute {rec.compute_s:8.2f}s", flush=True)

    records = run_suite(cfg, model, progress=progress)
    trials, summary = report(records, args.out)
    print(f"wrote {trials} and {summary}")
    with open(summary) as f:
        print(f.read())


def _bench_verify(args):
    from .bench import build_environment, verify
    from .robot import KinematicModel
    from .scenegen import Scene, render_heightmap, select_grasp, select_target
    from .trajectory import Trajectory

    model = KinematicModel()
    traj = Trajectory.load(args.traj)
    scene = Scene.load(args.scene)
    sel = select_target(render_heightmap(scene), scene)
    if sel is None:
        sys.exit("scene has no target box")
    env = build_environment(scene, sel[0])
    plan = select_grasp(scene, sel[0], model, env)
    if plan is None:
        sys.exit("scene has no feasible grasp")
    flag, min_clear, report = verify(traj, env, model, plan.grasped)
    print(f"collision-free and within limits: {flag}")
    print(f"min clearance: {min_clear:.6f} m")
    print(f"limit violations (pos/vel/acc/jerk): {report.position:.2e} "
          f"{report.velocity:.2e} {report.acceleration:.2e} "
          f"{report.jerk:.2e}")
    sys.exit(0 if flag else 1)


def _dataset_gen(args):
    from .bench import scene_records
    from .robot import KinematicModel
    from .warmstart import save_dataset

    model = KinematicModel()
    records = []
    seed = args.seed
    scenes_used = 0
    t0 = time.time()
    while len(records) < args.count:
        if args.scenes is not None and scenes_used >= args.scenes:
            break
        got = scene_records(seed, model, noise=args.noise,
                            max_picks=args.count - len(records))
        records.extend(got)
        scenes_used += 1
        if records and scenes_used % args.checkpoint_every == 0:
            save_dataset(records, args.out)
        rate = len(records) / max(time.time() - t0, 1e-9)
        print(f"seed {seed:5d}: +{len(got)} records "
              f"(total {len(records)}, {rate * 3600:.0f}/h)", flush=True)
        seed += 1
    if not records:
        sys.exit("no records generated")
    save_dataset(records, args.out)
    print(f"wrote {len(records)} records from {scenes_used} scenes "
          f"to {args.out}")


def _model_train(args):
    from .warmstart import TrainConfig, load_dataset, train

    records = load_dataset(args.data)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                      learning_rate=args.learning_rate, seed=args.seed)
    t0 = time.time()
    model, curve = train(records, cfg)
    model.save(args.out)
    print(f"trained on {len(records)} records in {time.time() - t0:.1f}s; "
          f"final train/val loss {curve[-1][0]:.4f}/{curve[-1][1]:.4f}")


def _model_eval(args):
    from .warmstart import WarmStartModel, load_dataset, predict_warmstart

    records = load_dataset(args.data)
    model = WarmStartModel.load(args.model)
    tau_err, t_err = [], []
    for r in records:
        traj, t_pred = predict_warmstart(
            model, r.heightmap, r.q0, r.qH, radius=r.radius,
            p0_ee=r.p0_ee, p1_ee=r.p1_ee, t_inflation=1.0)
        tau_err.append(float(np.abs(traj.positions() - r.tau).mean()))
        t_err.append(abs(t_pred - r.t_step))
    print(f"{len(records)} records: mean |tau error| "
          f"{np.mean(tau_err):.4f} rad, mean |t error| "
          f"{np.mean(t_err) * 1e3:.2f} ms")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="bomp",
        description="bin-picking trajectory optimization toolkit")
    sub = parser.add_subparsers(dest="cmd", required=True)
    _add_bench(sub)
    _add_dataset(sub)
    _add_model(sub)
    args = parser.parse_args(argv)
    if args.cmd == "bench":
        if args.bench_cmd == "run":
            _bench_run(args)
        else:
            _bench_verify(args)
    elif args.cmd == "dataset":
        _dataset_gen(args)
    elif args.cmd == "model":
        if args.model_cmd == "train":
            _model_train(args)
        else:
            _model_eval(args)


if __name__ == "__main__":
    main()
