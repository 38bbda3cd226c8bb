"""Command-line pipelines over the library.

Eight subcommands: simulate, identify, cem-identify, gradcheck, mpc,
fit-spheres, render, metrics.  Every run writes its outputs plus a JSON
manifest (inputs, seed, versions, wall time) to the directory given with
``--out``; rerunning with the same inputs reproduces the data files
byte-for-byte.  Exit codes: 0 success, 1 validation error, 2 numerical
failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import jax.numpy as jnp
import numpy as np
import yaml

from . import harness
from .dynamics import NumericalError, PhysParams, SceneState, build_fast_rollout
from .geometry import (DegenerateGradientError, fit_sphere_cloud,
                       load_sphere_cloud, load_xyz, save_sphere_cloud)
from .harness import (FLOAT_FMT, generate_scenario, geometry_hash,
                      load_config, load_dataset, load_trajectory, save_curve,
                      save_trajectory, write_manifest)
from .render import Camera, load_pgm, render_state, save_pgm
from .spatial import Pose
from .sysid import Dataset, IdentifyConfig, cem_identify, identify, metrics

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERICAL = 2


class _Parser(argparse.ArgumentParser):
    """argparse that reports flag errors with usage text and exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write("error: %s\n" % message)
        raise SystemExit(EXIT_INVALID)


def _phys_from_args(args) -> PhysParams:
    inertia = [float(v) for v in args.inertia.split(",")]
    return PhysParams.from_values(args.mass, inertia, args.mu,
                                  args.stiffness, args.damping)


def _add_phys_flags(p, mass=0.5, inertia="1e-3,1e-3,1e-3", mu=0.4,
                    stiffness=2000.0, damping=20.0):
    p.add_argument("--mass", type=float, default=mass)
    p.add_argument("--inertia", default=inertia,
                   help="diagonal inertia, comma-separated (kg m^2)")
    p.add_argument("--mu", type=float, default=mu)
    p.add_argument("--stiffness", type=float, default=stiffness)
    p.add_argument("--damping", type=float, default=damping)


def _out_dir(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


# ---------------------------------------------------------------------------
# Subcommand bodies.  Each returns the manifest inputs dict.
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    cloud = load_sphere_cloud(args.spheres)
    config = load_config(args.config, cloud)
    if args.seed is not None:
        config.seed = args.seed
    generate_scenario(config, out_dir=args.out)
    return {"config": args.config, "spheres": args.spheres}, config.seed


def _identify_common(args):
    dataset, cloud, config = load_dataset(args.data)
    free = tuple(args.free.split(","))
    init = _phys_from_args(args)
    return dataset, cloud, config, free, init


def _write_params(out, result):
    phys = result.phys
    payload = {"mu": float(phys.mu), "stiffness": float(phys.stiffness),
               "damping": float(phys.damping),
               "mass": float(phys.masses[0]),
               "inertia": [float(v) for v in phys.inertias[0]],
               "final_loss": float(np.min(result.loss_history))}
    with open(os.path.join(out, "params.yaml"), "w") as f:
        yaml.safe_dump(payload, f, sort_keys=True)


def cmd_identify(args):
    dataset, cloud, config, free, init = _identify_common(args)
    cfg = IdentifyConfig(mode=args.mode, learning_rate=args.lr,
                         iterations=args.iterations, free=free,
                         seed=args.seed or 0)
    result = identify(dataset, init, cloud, config.model(), cfg)
    out = _out_dir(args)
    _write_params(out, result)
    save_curve(os.path.join(out, "loss_history.csv"), result.loss_history,
               header="iteration,loss")
    if dataset.test:
        _heldout_report(out, dataset, cloud, config, init, result.phys)
    return {"data": args.data, "mode": args.mode, "free": args.free,
            "iterations": args.iterations, "lr": args.lr}, cfg.seed


def _heldout_report(out, dataset: Dataset, cloud, config, init, fitted):
    """Open-loop test-split errors before and after identification."""
    roll = build_fast_rollout(config.model(),
                              0 if dataset.test[0].x0.actuator_points is None
                              else dataset.test[0].x0.actuator_points.shape[0])
    log_scales = jnp.log(cloud.scales)

    def mean_err(phys):
        raw = harness._phys_raw(phys)
        errs = []
        for seq in dataset.test:
            pts = (seq.x0.actuator_points
                   if seq.x0.actuator_points is not None
                   else jnp.zeros((0, 3)))
            outp = roll(seq.x0.positions[0], seq.x0.orientations[0],
                        seq.x0.lin_vels[0], seq.x0.ang_vels[0], pts,
                        seq.actions, raw, cloud.centers, log_scales, dataset.h)
            errs.append(float(jnp.mean(
                jnp.linalg.norm(outp[0] - seq.positions, axis=1))))
        return float(np.mean(errs))

    e0, e1 = mean_err(init), mean_err(fitted)
    with open(os.path.join(out, "heldout.yaml"), "w") as f:
        yaml.safe_dump({"translation_error_init_m": e0,
                        "translation_error_fit_m": e1,
                        "improvement": e0 / max(e1, 1e-300)},
                       f, sort_keys=True)


def _raw_bounds(free, values):
    """Map positive bound values to the unconstrained raw space, per slice."""
    from .dynamics import MU_MAX

    if len(values) != len(free):
        raise ValueError("need one bound value per free slice")
    out = []
    for name, v in zip(free, values):
        if v <= 0:
            raise ValueError("bounds must be positive")
        if name == "mu":
            out.append(np.log(MU_MAX * np.arctanh(min(v, MU_MAX * 0.999999)
                                                  / MU_MAX)))
        else:
            out.append(np.log(v))
    return np.asarray(out)


def cmd_cem_identify(args):
    dataset, cloud, config, free, init = _identify_common(args)
    cfg = IdentifyConfig(mode=args.mode, free=free, seed=args.seed or 0)
    lo = _raw_bounds(free, [float(v) for v in args.bounds_lo.split(",")])
    hi = _raw_bounds(free, [float(v) for v in args.bounds_hi.split(",")])
    result = cem_identify(dataset, init, cloud, config.model(), cfg, lo, hi,
                          population=args.population, elites=args.elites,
                          iterations=args.iterations)
    out = _out_dir(args)
    _write_params(out, result)
    return {"data": args.data, "free": args.free,
            "population": args.population, "elites": args.elites,
            "iterations": args.iterations,
            "bounds_lo": args.bounds_lo, "bounds_hi": args.bounds_hi}, cfg.seed


def cmd_gradcheck(args):
    from .diff import ParamVector, rollout_grad
    from .sysid import sequence_loss_fn

    dataset, cloud, config, free, init = _identify_common(args)
    seq = dataset.train[0]
    pv = ParamVector(init, cloud, seq.x0, free=free)
    cfg = IdentifyConfig(mode="pose", free=free)
    report = rollout_grad(sequence_loss_fn(seq, cfg), pv, seq.actions,
                          config.model(), dataset.h, check=True,
                          fd_rel_step=args.rel_step)
    out = _out_dir(args)
    with open(os.path.join(out, "gradcheck.csv"), "w") as f:
        f.write("# slice,max_rel_error\n")
        for name in sorted(report.fd_errors):
            f.write(("%s," + FLOAT_FMT + "\n") % (name, report.fd_errors[name]))
    print("gradcheck max relative error %.3g" % report.max_fd_error)
    return {"data": args.data, "free": args.free,
            "rel_step": args.rel_step}, None


def cmd_mpc(args):
    from .control import MpcConfig, run_mpc

    cloud = load_sphere_cloud(args.spheres)
    config = load_config(args.config, cloud)
    phys = config.phys
    model = config.model()
    h = config.h
    rest_z, rest_quat = harness.rest_height(config)
    _, radius = cloud.bounding_sphere()
    pusher = jnp.array([-(float(radius) + config.pusher_gap), 0.0, rest_z])
    x0 = SceneState(jnp.array([[0.0, 0.0, rest_z]]), rest_quat[None],
                    jnp.zeros((1, 3)), jnp.zeros((1, 3)),
                    actuator_points=pusher[None],
                    actuator_vels=jnp.zeros((1, 3)))
    goal = Pose(jnp.array([args.goal_dx, args.goal_dy, rest_z]), rest_quat)
    cfg = MpcConfig(horizon=args.horizon, inner_iters=args.inner_iters,
                    learning_rate=args.lr, action_bound=args.bound,
                    w_act=1e-5)
    result = run_mpc(x0, goal, phys, model, cfg, h, args.steps)

    out = _out_dir(args)
    pos = np.stack([np.asarray(s.positions) for s in result.states])
    quat = np.stack([np.asarray(s.orientations) for s in result.states])
    lin = np.stack([np.asarray(s.lin_vels) for s in result.states])
    ang = np.stack([np.asarray(s.ang_vels) for s in result.states])
    pts = np.stack([np.asarray(s.actuator_points) for s in result.states])
    vels = np.stack([np.asarray(s.actuator_vels)
                     if s.actuator_vels is not None else np.zeros((1, 3))
                     for s in result.states])
    save_trajectory(os.path.join(out, "trajectory.csv"), pos, quat, lin, ang,
                    h, geometry=geometry_hash(cloud),
                    actuator_points=pts, actuator_vels=vels)
    save_curve(os.path.join(out, "cost_history.csv"),
               result.costs, header="replan,cost")
    err = float(np.linalg.norm(pos[-1, 0] - np.asarray(goal.position)))
    with open(os.path.join(out, "summary.yaml"), "w") as f:
        yaml.safe_dump({"final_position_error_m": err,
                        "median_plan_time_s": result.median_plan_time,
                        "steps": args.steps}, f, sort_keys=True)
    print("mpc final position error %.4f m, median replan %.1f ms"
          % (err, 1e3 * result.median_plan_time))
    return {"config": args.config, "spheres": args.spheres,
            "steps": args.steps, "horizon": args.horizon,
            "goal_dx": args.goal_dx, "goal_dy": args.goal_dy,
            "bound": args.bound}, None


def cmd_fit_spheres(args):
    points = load_xyz(args.points)
    cloud = fit_sphere_cloud(points, args.num, iters=args.iterations,
                             seed=args.seed or 0)
    out = _out_dir(args)
    save_sphere_cloud(os.path.join(out, "spheres.csv"), cloud)
    return {"points": args.points, "num": args.num,
            "iterations": args.iterations}, args.seed or 0


def cmd_render(args):
    cloud = load_sphere_cloud(args.spheres)
    tf = load_trajectory(args.trajectory)
    camera = Camera.looking_down(args.camera_height, width=args.width,
                                 height=args.height)
    out = _out_dir(args)
    for t in range(0, tf.positions.shape[0], args.stride):
        img = render_state(cloud, Pose(tf.positions[t, 0],
                                       tf.orientations[t, 0]), camera)
        save_pgm(os.path.join(out, "frame_%04d.pgm" % t), img)
    return {"spheres": args.spheres, "trajectory": args.trajectory,
            "width": args.width, "height": args.height,
            "camera_height": args.camera_height, "stride": args.stride}, None


def cmd_metrics(args):
    pred = load_trajectory(args.pred)
    gt = load_trajectory(args.gt)
    pred_images = gt_images = None
    if args.pred_images and args.gt_images:
        pred_images = np.stack([
            load_pgm(os.path.join(args.pred_images, n))
            for n in sorted(os.listdir(args.pred_images)) if n.endswith(".pgm")])
        gt_images = np.stack([
            load_pgm(os.path.join(args.gt_images, n))
            for n in sorted(os.listdir(args.gt_images)) if n.endswith(".pgm")])
    e_trans, e_rot, e_psnr = metrics(
        pred.positions, pred.orientations, gt.positions, gt.orientations,
        pred_images=pred_images, gt_images=gt_images)
    out = _out_dir(args)
    payload = {"E_trans_m": e_trans, "E_rot_rad": e_rot}
    if e_psnr is not None:
        payload["E_psnr_db"] = e_psnr
    with open(os.path.join(out, "metrics.yaml"), "w") as f:
        yaml.safe_dump(payload, f, sort_keys=True)
    print("E_trans %.6f m  E_rot %.6f rad%s" % (
        e_trans, e_rot,
        "" if e_psnr is None else "  E_psnr %.2f dB" % e_psnr))
    return {"pred": args.pred, "gt": args.gt}, None


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="diffcontact",
                     description="differentiable contact simulation pipelines")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        p.add_argument("--out", required=True, help="output directory")
        return p

    p = add("simulate", cmd_simulate, "generate a scenario dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--spheres", required=True)
    p.add_argument("--seed", type=int, default=None)

    for name, fn in (("identify", cmd_identify),
                     ("cem-identify", cmd_cem_identify),
                     ("gradcheck", cmd_gradcheck)):
        p = add(name, fn, "parameter recovery on a dataset")
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--free", default="mu,K,D")
        p.add_argument("--seed", type=int, default=None)
        _add_phys_flags(p)
        if name == "identify":
            p.add_argument("--mode", choices=("pose", "silhouette"),
                           default="pose")
            p.add_argument("--iterations", type=int, default=300)
            p.add_argument("--lr", type=float, default=0.05)
        elif name == "cem-identify":
            p.add_argument("--mode", choices=("pose", "silhouette"),
                           default="pose")
            p.add_argument("--iterations", type=int, default=80)
            p.add_argument("--population", type=int, default=64)
            p.add_argument("--elites", type=int, default=8)
            p.add_argument("--bounds-lo", default="0.1,200,1",
                           help="mu,K,D lower bounds (positive values)")
            p.add_argument("--bounds-hi", default="2.5,5000,100")
        else:
            p.add_argument("--rel-step", type=float, default=1e-5)

    p = add("mpc", cmd_mpc, "closed-loop planar pushing")
    p.add_argument("--config", required=True)
    p.add_argument("--spheres", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--inner-iters", type=int, default=15)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--bound", type=float, default=0.4)
    p.add_argument("--goal-dx", type=float, default=0.1)
    p.add_argument("--goal-dy", type=float, default=0.0)

    p = add("fit-spheres", cmd_fit_spheres, "fit a sphere cloud to points")
    p.add_argument("--points", required=True, help="XYZ point-cloud file")
    p.add_argument("--num", type=int, required=True)
    p.add_argument("--iterations", type=int, default=400)
    p.add_argument("--seed", type=int, default=None)

    p = add("render", cmd_render, "render trajectory silhouettes to PGM")
    p.add_argument("--spheres", required=True)
    p.add_argument("--trajectory", required=True)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--camera-height", type=float, default=1.0)
    p.add_argument("--stride", type=int, default=1)

    p = add("metrics", cmd_metrics, "pose/image error metrics between files")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--pred-images", default=None)
    p.add_argument("--gt-images", default=None)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    t0 = time.perf_counter()
    try:
        os.makedirs(args.out, exist_ok=True)
        inputs, seed = args.fn(args)
    except (NumericalError, DegenerateGradientError, FloatingPointError) as e:
        sys.stderr.write("numerical failure: %s\n" % e)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, OSError) as e:
        sys.stderr.write("error: %s\n" % e)
        return EXIT_INVALID
    write_manifest(args.out, args.command, inputs, seed,
                   time.perf_counter() - t0)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
