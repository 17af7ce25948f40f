"""Command-line entry point: ``evsplat <simulate|train|render|eval|perturb-poses|gradcheck>``.

Exit codes: 0 success, 2 usage or input error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_cloud, save_cloud
from .config import PRESETS, Config, load_config
from .errors import ContractError, InvalidParameterError, NumericError
from .events import perturb_poses, read_event_file, write_event_file
from .images import read_raw, write_png, write_raw
from .poserefine import PoseTrack, read_pose_file, track_errors, write_pose_file
from .scene import CameraModel

log = logging.getLogger("evsplat")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _camera(cfg: Config) -> CameraModel:
    c = cfg.camera
    return CameraModel.from_fov(c.width, c.height, c.fov_deg, z_near=c.z_near, z_far=c.z_far)


def _orbit(cfg: Config):
    from .toy import Orbit

    t = cfg.trajectory
    return Orbit(duration_us=t.duration_us, radius=t.radius, elevation_deg=t.elevation_deg,
                 speed_ratio=t.speed_ratio, cycles=t.cycles, turns=t.turns,
                 wobble_deg=t.wobble_deg, wobble_per_turn=t.wobble_per_turn)


def _scene(cfg: Config):
    from .toy import toy_cloud

    if cfg.scene.source == "toy":
        return toy_cloud(cfg.scene.toy_gaussians, cfg.scene.toy_seed)
    path = Path(cfg.scene.source)
    if not path.is_file():
        raise UsageError(f"scene checkpoint {path} not found")
    return load_cloud(path)[0]


def _noisy(track: PoseTrack, cfg: Config) -> PoseTrack:
    """Apply the configured OU noise; the sigmas given are stationary std devs."""
    e = cfg.events
    scale = np.sqrt(2.0 * e.noise_theta)
    return perturb_poses(track, np.radians(e.noise_rotation_deg) * scale, e.noise_translation * scale,
                         e.noise_theta, np.random.default_rng(e.seed))


def _write_views(out: Path, cloud, poses, camera, background) -> None:
    from .rasterizer import render

    out.mkdir(parents=True, exist_ok=True)
    track = PoseTrack.from_poses(np.arange(len(poses), dtype=np.int64), poses)
    write_pose_file(out / "poses.txt", track)
    for i, pose in enumerate(poses):
        img = render(cloud, pose, camera, background).linear_image
        write_raw(out / f"view_{i:03d}.raw", img)
        write_png(out / f"view_{i:03d}.png", img)


def cmd_simulate(args, cfg: Config) -> int:
    from .toy import heldout_poses, simulate_orbit

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cloud = _scene(cfg)
    camera = _camera(cfg)
    orbit = _orbit(cfg)
    background = np.array(cfg.train.background)
    store = simulate_orbit(cloud, camera, orbit, cfg.events.contrast_threshold, background,
                           cfg.trajectory.max_step_deg)
    write_event_file(out / "events.evt", store)
    gt = orbit.track(cfg.trajectory.pose_rate_hz)
    write_pose_file(out / "poses_gt.txt", gt)
    write_pose_file(out / "poses.txt", _noisy(gt, cfg))
    save_cloud(out / "scene.evs", cloud)
    views = heldout_poses(orbit, cfg.trajectory.heldout_views, cfg.trajectory.heldout_elevation_offset_deg)
    _write_views(out / "heldout", cloud, views, camera, background)
    (out / "config.ini").write_text(cfg.to_text())
    print(f"{len(store)} events, {len(gt)} poses, {len(views)} held-out views -> {out}")
    return EXIT_OK


def cmd_train(args, cfg: Config) -> int:
    from .trainer import init_state, load_state, save_state, train

    data = Path(args.data) if args.data else None
    events = Path(args.events) if args.events else data / "events.evt" if data else None
    poses = Path(args.poses) if args.poses else data / "poses.txt" if data else None
    if events is None or poses is None:
        raise UsageError("give --data or both --events and --poses")
    store = read_event_file(events)
    track = read_pose_file(poses)
    camera = _camera(cfg)
    if store.shape != camera.shape:
        raise UsageError(f"event sensor {store.shape} does not match camera {camera.shape}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_text())
    if args.resume:
        state = load_state(args.resume, store, camera, cfg.train)
    else:
        state = init_state(store, track, camera, cfg.train)

    def report(s, rec):
        if s.iteration % cfg.train.log_every == 0:
            log.info("iter %d loss %.5f gaussians %d", rec["iteration"], rec["loss"], rec["n_gaussians"])

    train(state, args.iterations, metrics_path=out / "metrics.jsonl", checkpoint_dir=out, callback=report)
    save_state(out / "state.evs", state)
    save_cloud(out / "cloud.evs", state.cloud, state.iteration)
    write_pose_file(out / "poses_refined.txt", state.track, refined=True)
    print(f"trained to iteration {state.iteration}, {len(state.cloud)} Gaussians -> {out}")
    return EXIT_OK


def cmd_render(args, cfg: Config) -> int:
    cloud, _ = load_cloud(args.checkpoint)
    track = read_pose_file(args.poses)
    poses = [track.base_pose(i) for i in range(len(track))]
    _write_views(Path(args.out), cloud, poses, _camera(cfg), np.array(cfg.train.background))
    print(f"rendered {len(poses)} views -> {args.out}")
    return EXIT_OK


def cmd_eval(args, cfg: Config) -> int:
    from .evaluate import evaluate_views

    cloud, _ = load_cloud(args.checkpoint)
    views = Path(args.views)
    track = read_pose_file(views / "poses.txt")
    poses = [track.base_pose(i) for i in range(len(track))]
    gts = []
    for i in range(len(poses)):
        path = views / f"view_{i:03d}.raw"
        if not path.is_file():
            raise UsageError(f"missing reference image {path}")
        gts.append(np.log(np.maximum(read_raw(path), 1e-5)))
    camera = _camera(cfg)
    align = args.align or cfg.eval.align_poses
    rows = evaluate_views(cloud, poses, gts, camera, align, cfg.eval.align_iters, cfg.eval.align_lr,
                          np.array(cfg.train.background))
    lines = ["view\tpsnr\tssim"]
    lines += [f"{i}\t{m.psnr:.4f}\t{m.ssim:.5f}" for i, m in enumerate(rows)]
    lines.append(f"mean\t{np.mean([m.psnr for m in rows]):.4f}\t{np.mean([m.ssim for m in rows]):.5f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_perturb(args, cfg: Config) -> int:
    track = read_pose_file(args.poses)
    noisy = _noisy(track, cfg)
    write_pose_file(args.out, noisy)
    rot, trans = track_errors(noisy, track, refined=False)
    print(f"mean rotation error {np.degrees(rot.mean()):.4f} deg, mean translation error {trans.mean():.5f}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: Config) -> int:
    from .gradcheck import run_suite

    g = cfg.gradcheck
    res = run_suite(g.scenes, g.gaussians, g.size, g.step, g.seed)
    for name, err in res.max_rel_error.items():
        print(f"{name:15s} max rel err {err:.3e}  checked {res.checked[name]:6d}  "
              f"excluded {res.excluded[name]}")
    print(f"worst {res.worst:.3e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="evsplat", description="Event-camera Gaussian splatting: simulate, train, render and evaluate.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--preset", choices=sorted(PRESETS), help="named set of defaults applied first")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate events from a scene and orbit")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", parents=[common], help="reconstruct a Gaussian cloud from events")
    s.add_argument("--data", help="directory written by 'simulate'")
    s.add_argument("--events", help="event file (overrides --data)")
    s.add_argument("--poses", help="pose file (overrides --data)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--resume", help="training checkpoint to continue from")
    s.add_argument("--iterations", type=int, help="stop after this many more iterations")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", parents=[common], help="render a checkpoint at given poses")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--poses", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", parents=[common], help="PSNR/SSIM against held-out views")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--views", required=True, help="directory with poses.txt and view_NNN.raw")
    s.add_argument("--align", action="store_true", help="refine test poses with Gaussians frozen")
    s.add_argument("--out", help="write the metrics table here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("perturb-poses", parents=[common], help="add OU noise to a pose file")
    s.add_argument("--poses", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_perturb)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, preset=args.preset)
        return args.func(args, cfg)
    except NumericError as e:
        print(f"evsplat: numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, InvalidParameterError, ContractError, OSError, json.JSONDecodeError) as e:
        print(f"evsplat: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
