"""Command-line entry point: ``contact-forecast <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import io
from .errors import ParseError
from .geom import sample_scene_points
from .nets import Arch, ContactNet, MotionNet, forecast
from .refine import (GlobalTrack, ObservationSet, SurrogateBody, corrupt,
                     energy_trace_csv, observe, posed_joints, refine,
                     synthetic_track)
from .synth import MOTIONS, SCENES, SynthSpec, generate_synthetic
from .train import (TrainConfig, config_from_kv, evaluate, format_kv,
                    load_config, parse_kv, prepare_samples,
                    train_contact_stage, train_motion_stage)

log = logging.getLogger("contact_forecast")

DEFAULT_SCENE = {"straight-walk": "corridor", "turn": "room-with-box", "sit-on-box": "room-with-box"}


class UsageError(Exception):
    pass


def _add_config_flags(p):
    p.add_argument("--config", help="key = value training config file")
    p.add_argument("--sigma", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--dct-l", type=int)
    p.add_argument("--past", type=int)
    p.add_argument("--future", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="learning rate of the stage being trained")
    p.add_argument("--voxel-res", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--sample-count", type=int)
    p.add_argument("--max-steps", type=int)


def _env_seed():
    raw = os.environ.get("CAMF_SEED", "").strip()
    if not raw:
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"CAMF_SEED must be an integer, got {raw!r}") from None


def _config(args, lr_field=None) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    seed = args.seed if args.seed is not None else _env_seed()
    over = dict(sigma=args.sigma, epsilon=args.epsilon, dct_l=args.dct_l, past=args.past,
                future=args.future, seed=seed, epochs=args.epochs, voxel_res=args.voxel_res,
                hidden=args.hidden, sample_count=args.sample_count, max_steps=args.max_steps)
    if lr_field and args.lr is not None:
        over[lr_field] = args.lr
    return cfg.with_overrides(**over)


def _load_pairs(data_dir):
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.txt"
    if not manifest.exists():
        raise UsageError(f"{manifest} not found (create it with gen-synth)")
    pairs = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError("expected '<scene> <motion>'", line=lineno, path=manifest)
        scene_f, motion_f = parts
        pairs.append((io.load_scene(data_dir / scene_f), io.load_motion(data_dir / motion_f)))
    if not pairs:
        raise UsageError(f"{manifest} lists no sequences")
    return pairs


def _save_model(path, net, cfg: TrainConfig):
    ad.save_checkpoint(path, net.state_dict())
    side = {f"arch.{k}": v for k, v in net.arch.to_dict().items()}
    side.update({f"train.{k}": v for k, v in asdict(cfg).items()})
    Path(str(path) + ".cfg").write_text("# model sidecar\n" + format_kv(side))


def _load_model(path, cls):
    side = Path(str(path) + ".cfg")
    if not side.exists():
        raise UsageError(f"missing sidecar config {side}")
    kv = parse_kv(side.read_text(), side)
    types = {f.name: f.type for f in fields(Arch)}
    arch = Arch(**{k[5:]: (int(v) if types[k[5:]] in ("int", int) else float(v))
                   for k, v in kv.items() if k.startswith("arch.")})
    cfg = config_from_kv({k[6:]: v for k, v in kv.items() if k.startswith("train.")})
    net = cls(arch)
    net.load_state_dict(ad.load_checkpoint(path))
    return net, cfg


# subcommands ---------------------------------------------------------------

def cmd_gen_synth(args):
    templates = args.template.split(",")
    for t in templates:
        if t not in MOTIONS:
            raise UsageError(f"unknown template {t!r}; choose from {', '.join(MOTIONS)}")
    if args.scene and args.scene not in SCENES:
        raise UsageError(f"unknown scene {args.scene!r}; choose from {', '.join(SCENES)}")
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(args.count):
        t = templates[i % len(templates)]
        spec = SynthSpec(scene=args.scene or DEFAULT_SCENE[t], motion=t, density=args.density,
                         frames=args.frames, fps=args.fps, noise=args.noise, seed=seed + i)
        scene, motion = generate_synthetic(spec)
        d = f"seq_{i:03d}"
        (out / d).mkdir(exist_ok=True)
        io.save_scene(out / d / "scene.cams", scene)
        io.save_motion(out / d / "motion.txt", motion)
        lines.append(f"{d}/scene.cams {d}/motion.txt")
    (out / "manifest.txt").write_text("# scene motion\n" + "\n".join(lines) + "\n")
    if args.refine_window:
        body = SurrogateBody()
        track, theta = synthetic_track(args.refine_window, body, seed=seed)
        obs = observe(track, theta, body)
        noisy, noisy_theta = corrupt(track, theta, seed=seed + 1)
        io.save_track(out / "track_gt.txt", track.R, track.Tr, theta)
        io.save_track(out / "track_noisy.txt", noisy.R, noisy.Tr, noisy_theta)
        (out / "obs").mkdir(exist_ok=True)
        for p, cloud in enumerate(obs.clouds):
            io.save_scene(out / "obs" / f"frame_{p:04d}.xyz", io.SceneCloud(cloud))
    log.info("wrote %d sequence(s) to %s", args.count, out)


def cmd_train_contact(args):
    cfg = _config(args, "lr_contact")
    samples = prepare_samples(_load_pairs(args.data), cfg)
    res = train_contact_stage(samples, cfg, log_path=str(args.out) + ".log")
    _save_model(args.out, res.net, cfg)
    log.info("contact stage: %d steps, final epoch loss %.6g", res.steps, res.epoch_losses[-1])


def cmd_train_motion(args):
    cfg = _config(args, "lr_motion")
    samples = prepare_samples(_load_pairs(args.data), cfg)
    res = train_motion_stage(samples, cfg, use_contact=not args.no_contact,
                             log_path=str(args.out) + ".log")
    _save_model(args.out, res.net, cfg)
    log.info("motion stage: %d steps, final epoch loss %.6g", res.steps, res.epoch_losses[-1])


def cmd_predict(args):
    cnet, ccfg = _load_model(args.contact_ckpt, ContactNet)
    mnet, _ = _load_model(args.motion_ckpt, MotionNet)
    if args.future is not None and args.future != mnet.arch.future:
        raise UsageError(f"--future {args.future} does not match the model ({mnet.arch.future})")
    scene = io.load_scene(args.scene)
    motion = io.load_motion(args.motion)
    P = mnet.arch.past
    start = motion.num_frames - P if args.start is None else args.start
    if start < 0 or start + P > motion.num_frames:
        raise UsageError(f"need {P} observed frames starting at {start}; file has {motion.num_frames}")
    hist = motion.frames[start:start + P]
    seed = ccfg.seed if args.seed is None else args.seed
    pts = sample_scene_points(scene, hist[-1, motion.root_index], ccfg.sample_radius,
                              ccfg.sample_count, seed)
    fc = forecast(pts, hist, cnet, mnet, ccfg.sigma, ccfg.epsilon)
    io.save_motion(args.out, io.MotionSequence(fc.joints, motion.fps, motion.root_index))
    Path(args.contacts_out or str(args.out) + ".contacts.csv").write_text(io.contact_points_csv(fc.contact_points))


def cmd_eval(args):
    cnet, ccfg = _load_model(args.contact_ckpt, ContactNet)
    mnet, mcfg = _load_model(args.motion_ckpt, MotionNet)
    cfg = ccfg if args.seed is None else replace(ccfg, seed=args.seed)
    samples = prepare_samples(_load_pairs(args.data), cfg)
    rep = evaluate(samples, cnet, mnet, cfg, mode=args.mode)
    sys.stdout.write(rep.to_table())
    if args.out:
        Path(args.out).write_text(rep.to_csv())


def cmd_refine(args):
    R, Tr, Theta = io.load_track(args.track)
    files = sorted(p for p in Path(args.obs).iterdir() if p.suffix in (".xyz", ".cams"))
    if len(files) != len(R):
        raise UsageError(f"{len(files)} observation files for a {len(R)}-frame track")
    obs = ObservationSet([io.load_scene(f).points for f in files])
    body = SurrogateBody()
    if Theta.shape[1] != body.pose_dim:
        raise UsageError(f"track pose dimension {Theta.shape[1]} != {body.pose_dim}")
    track, theta, r1, r2 = refine(GlobalTrack(R, Tr), Theta, None, body, obs, args.iters, args.lr)
    io.save_track(args.out, track.R, track.Tr, theta)
    if args.joints_out:
        io.save_motion(args.joints_out, io.MotionSequence(posed_joints(track, theta, body), args.fps))
    Path(args.trace or str(args.out) + ".energy.csv").write_text(energy_trace_csv(r1, r2))
    log.info("stage 1 best %.6g, stage 2 best %.6g", r1.best[-1], r2.best[-1])


def cmd_export_viz(args):
    scene = io.load_scene(args.scene) if args.scene else None
    motion = io.load_motion(args.motion)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    parents = io.default_parents(motion.num_joints, motion.root_index)
    pts = scene.points if scene is not None else None
    if pts is not None and args.max_scene_points and len(pts) > args.max_scene_points:
        pts = pts[np.linspace(0, len(pts) - 1, args.max_scene_points).astype(int)]
    for f in range(0, motion.num_frames, args.every):
        (out / f"frame_{f:04d}.obj").write_text(io.obj_lineset(motion.frames[f], parents, pts))


def build_parser():
    p = argparse.ArgumentParser(prog="contact-forecast",
                                description="Contact-aware human motion forecasting toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="generate synthetic scenes and motions")
    g.add_argument("--template", default="straight-walk",
                   help=f"motion template(s), comma separated: {', '.join(MOTIONS)}")
    g.add_argument("--scene", help=f"scene template: {', '.join(SCENES)}")
    g.add_argument("--frames", type=int, default=120)
    g.add_argument("--fps", type=float, default=30.0)
    g.add_argument("--density", type=float, default=100.0)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int)
    g.add_argument("--refine-window", type=int, default=0,
                   help="also write a noisy refinement track and observations of this length")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_synth)

    for name, func in (("train-contact", cmd_train_contact), ("train-motion", cmd_train_motion)):
        t = sub.add_parser(name)
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True)
        _add_config_flags(t)
        if name == "train-motion":
            t.add_argument("--no-contact", action="store_true", help="train with contact points zeroed")
        t.set_defaults(func=func)

    pr = sub.add_parser("predict")
    pr.add_argument("--scene", required=True)
    pr.add_argument("--motion", required=True)
    pr.add_argument("--contact-ckpt", required=True)
    pr.add_argument("--motion-ckpt", required=True)
    pr.add_argument("--start", type=int)
    pr.add_argument("--future", type=int)
    pr.add_argument("--seed", type=int)
    pr.add_argument("--out", required=True)
    pr.add_argument("--contacts-out")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval")
    e.add_argument("--data", required=True)
    e.add_argument("--contact-ckpt", required=True)
    e.add_argument("--motion-ckpt", required=True)
    e.add_argument("--mode", choices=("predicted", "gt", "none"), default="predicted")
    e.add_argument("--seed", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("refine")
    r.add_argument("--track", required=True)
    r.add_argument("--obs", required=True, help="directory of per-frame .xyz/.cams clouds")
    r.add_argument("--out", required=True)
    r.add_argument("--joints-out")
    r.add_argument("--trace")
    r.add_argument("--iters", type=int, default=300)
    r.add_argument("--lr", type=float, default=0.01)
    r.add_argument("--fps", type=float, default=30.0)
    r.set_defaults(func=cmd_refine)

    x = sub.add_parser("export-viz")
    x.add_argument("--motion", required=True)
    x.add_argument("--scene")
    x.add_argument("--every", type=int, default=1)
    x.add_argument("--max-scene-points", type=int, default=20000)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_viz)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except UsageError as e:
        print(f"contact-forecast: error: {e}", file=sys.stderr)
        return 2
    except (ParseError, ValueError, OSError) as e:
        print(f"contact-forecast: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
