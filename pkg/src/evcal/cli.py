"""Command-line interface: ``evcal calibrate | simulate | evaluate-ate | report``."""

import argparse
import logging
import os
import sys

from . import __version__
from .config import CalibrationConfig, SceneConfig
from .errors import EvcalError, InfeasibleCalibrationError
from .events import load_events, save_events
from .trajectory import absolute_trajectory_error, read_pose_log, write_pose_log

log = logging.getLogger("evcal")

EXIT_OK = 0
EXIT_INFEASIBLE = 1
EXIT_NOT_CONVERGED = 2


def _limit_threads(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional
        return None
    return threadpool_limits(limits=int(n))


def default_pose_path(out):
    root, _ = os.path.splitext(out)
    return root + "_poses.txt"


def cmd_calibrate(args):
    from .pipeline import calibrate
    from .results import pose_samples, write_result

    cfg = CalibrationConfig.load(args.config) if args.config else CalibrationConfig()
    if args.mode is not None:
        cfg.features.mode = args.mode
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    cfg.validate()
    if args.print_config:
        sys.stdout.write(cfg.dump())
        return EXIT_OK
    if not args.events or not args.out:
        print("evcal calibrate: --events and --out are required", file=sys.stderr)
        return EXIT_INFEASIBLE
    _limit_threads(cfg.threads)
    try:
        stream = load_events(args.events, width=cfg.sensor.width, height=cfg.sensor.height)
    except (OSError, EvcalError) as exc:
        print(f"evcal calibrate: cannot read events: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    try:
        result = calibrate(stream, cfg)
    except InfeasibleCalibrationError as exc:
        print(f"evcal calibrate: calibration infeasible: {exc}", file=sys.stderr)
        for key, value in exc.diagnostics.items():
            print(f"  {key}: {value}", file=sys.stderr)
        return EXIT_INFEASIBLE
    write_result(args.out, result)
    t_us, poses = pose_samples(result)
    write_pose_log(args.poses or default_pose_path(args.out), t_us, poses)
    res = result.result
    k = res.intrinsics
    print(f"fx={k.fx:.4f} fy={k.fy:.4f} cx={k.cx:.4f} cy={k.cy:.4f} "
          f"dist=[{', '.join(f'{d:.6g}' for d in k.dist)}]")
    print(f"frames={len(result.frames)} segments={len(res.segments)} "
          f"residual_rms_m={res.stats.rms:.6g} iterations={res.iterations} termination={res.termination}")
    if not res.converged:
        print("evcal calibrate: optimizer did not converge; best-effort result written",
              file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_simulate(args):
    from .synthetic import NoiseConfig, default_scene, generate

    sc = SceneConfig.load(args.scene) if args.scene else SceneConfig()
    if args.seed is not None:
        sc.seed = args.seed
    if args.print_config:
        sys.stdout.write(sc.dump())
        return EXIT_OK
    if not args.out_prefix:
        print("evcal simulate: --out-prefix is required", file=sys.stderr)
        return EXIT_INFEASIBLE
    noise = NoiseConfig(sc.noise.pixel_jitter, sc.noise.clutter_fraction, sc.noise.timestamp_jitter_us)
    scene = default_scene(sc.duration, sc.speed, noise, sc.intrinsics.intrinsics(), sc.pattern.spec(),
                          width=sc.sensor.width, height=sc.sensor.height,
                          pole_sharpness=sc.pole_sharpness, min_flow=sc.min_flow,
                          quantize=sc.quantize)
    try:
        stream, (t_log, poses) = generate(scene, sc.event_rate, sc.duration, sc.seed)
    except EvcalError as exc:
        print(f"evcal simulate: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    ext = ".csv" if sc.format == "csv" else ".evb"
    events_path = args.out_prefix + "_events" + ext
    gt_path = args.out_prefix + "_gt.txt"
    save_events(events_path, stream, sc.format)
    write_pose_log(gt_path, t_log, poses)
    print(f"wrote {len(stream)} events to {events_path} and {len(t_log)} poses to {gt_path}")
    return EXIT_OK


def cmd_evaluate_ate(args):
    try:
        t_est, est = read_pose_log(args.est)
        t_gt, gt = read_pose_log(args.gt)
        stats = absolute_trajectory_error(t_est, est[:, :3], t_gt, gt[:, :3], args.max_offset_us)
    except (OSError, EvcalError) as exc:
        print(f"evcal evaluate-ate: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    for name in ("rmse", "mean", "median", "std"):
        print(f"{name}: {getattr(stats, name)!r}")
    print(f"pairs: {stats.n}")
    return EXIT_OK


def cmd_report(args):
    from .report import write_report
    from .results import read_result

    try:
        data = read_result(args.result)
        cfg = data.get("config") or {}
        sensor = cfg.get("sensor", {})
        stream = load_events(args.events, width=sensor.get("width"), height=sensor.get("height"))
    except (OSError, ValueError, EvcalError) as exc:
        print(f"evcal report: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    written = write_report(data, stream, args.out_dir)
    print(f"wrote {len(written)} files to {args.out_dir}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="evcal", description=__doc__)
    p.add_argument("--version", action="version", version=f"evcal {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0,
                   help="log progress (-v) or debug details (-vv) to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("calibrate", help="estimate intrinsics from an event file")
    c.add_argument("--events", help="event file (.csv or .evb)")
    c.add_argument("--config", help="YAML configuration; missing keys use defaults")
    c.add_argument("--out", help="result file (YAML)")
    c.add_argument("--poses", help="refined pose log (default: <out>_poses.txt)")
    c.add_argument("--mode", choices=("hard", "soft"), help="feature extraction mode")
    c.add_argument("--seed", type=int, help="random seed")
    c.add_argument("--threads", type=int, help="cap on numerical library threads")
    c.add_argument("--print-config", action="store_true", help="print the effective configuration")
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("simulate", help="generate a synthetic event stream and ground truth")
    s.add_argument("--scene", help="YAML scene description; missing keys use defaults")
    s.add_argument("--out-prefix", help="writes <prefix>_events.csv|.evb and <prefix>_gt.txt")
    s.add_argument("--seed", type=int, help="override the scene seed")
    s.add_argument("--print-config", action="store_true", help="print the effective scene")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate-ate", help="absolute trajectory error between pose logs")
    e.add_argument("--est", required=True, help="estimated pose log")
    e.add_argument("--gt", required=True, help="ground-truth pose log")
    e.add_argument("--max-offset-us", type=float, default=20000.0,
                   help="largest timestamp difference for association")
    e.set_defaults(func=cmd_evaluate_ate)

    r = sub.add_parser("report", help="diagnostic images for a result")
    r.add_argument("--result", required=True)
    r.add_argument("--events", required=True)
    r.add_argument("--out-dir", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, EvcalError) as exc:
        print(f"evcal {args.command}: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
