"""Command line entry point.

Every subcommand takes ``--config PATH`` (JSON, any subset of the training
configuration), ``--seed`` and ``--out DIR``. Exit status is 0 on success,
1 on a usage error and 2 when the command fails at run time.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("spavatar")

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _csv(path, rows):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _config(args):
    from .config import ConfigError, TrainConfig

    base = TrainConfig.paper_scale() if args.paper_scale else TrainConfig()
    try:
        cfg = TrainConfig.load(args.config, base) if args.config else base
    except (OSError, ConfigError) as exc:
        raise UsageError(f"bad config: {exc}") from exc
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    return cfg


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_mesh(path):
    from .io import read_obj, read_ply
    from .pointcloud import TriangleMesh

    path = Path(path)
    mesh = read_obj(path) if path.suffix.lower() == ".obj" else read_ply(path)
    if not isinstance(mesh, TriangleMesh):
        raise UsageError(f"{path} holds a point cloud, not a mesh")
    return mesh


def _pose(path):
    from .skeleton import PoseParams

    return PoseParams.from_json(json.loads(Path(path).read_text()))


# -- subcommands ------------------------------------------------------------------

def cmd_generate(args, cfg):
    from .avatar import save_subject
    from .io import write_ply
    from .semantic import write_vertex_labels
    from .synthetic import generate_subject

    out = _out(args)
    subject = generate_subject(cfg.seed, args.poses)
    save_subject(subject, out / "subject.spav")
    write_ply(subject.body.mesh, out / "body.ply")
    write_ply(subject.template_scan, out / "template_scan.ply")
    subject.skeleton.save(out / "skeleton.json")
    write_vertex_labels(subject.body.vertex_labels, out / "vertex_labels.txt")
    rows = []
    for i, (pose, scan) in enumerate(zip(subject.poses, subject.scans)):
        write_ply(scan, out / f"scan_{i:03d}.ply")
        (out / f"pose_{i:03d}.json").write_text(json.dumps(pose.to_json()))
        rows.append({"pose": i, "vertices": len(scan.vertices), "faces": len(scan.faces)})
    _csv(out / "generate.csv", rows)


def _subject(args):
    from .avatar import load_subject

    if not args.subject:
        raise UsageError("--subject is required")
    return load_subject(args.subject)


def cmd_train_geom(args, cfg):
    from .avatar import Avatar, save_avatar
    from .train import train_geometry

    out = _out(args)
    subject = _subject(args)
    model, history = train_geometry(subject, cfg, log_csv=out / "train_geom.csv", checkpoint_dir=out)
    save_avatar(Avatar((model,)), out / "geometry.spav")


def cmd_transfer(args, cfg):
    from .avatar import load_avatar, save_avatar
    from .semantic import write_semantic_ply
    from .train import transfer

    out = _out(args)
    subject = _subject(args)
    model = load_avatar(args.checkpoint).model
    avatar, result = transfer(subject, model, cfg)
    save_avatar(avatar, out / "avatar.spav")
    write_semantic_ply(avatar.points, out / "semantic.ply")
    _csv(out / "transfer.csv", [{"iteration": i, "loss": l, "best": b}
                                for i, (l, b) in enumerate(zip(result.history, result.best))])


def cmd_train_appearance(args, cfg):
    from .avatar import load_avatar, save_avatar
    from .train import fit_appearance

    out = _out(args)
    subject = _subject(args)
    avatar = load_avatar(args.checkpoint)
    if avatar.points is None:
        raise ValueError("checkpoint has no semantic points; run transfer first")
    textured, logs = fit_appearance(subject, avatar, cfg)
    save_avatar(textured, out / "avatar.spav")
    rows = [{"stage": "autoencoder", "step": i, "loss": l, "best": b}
            for i, (l, b) in enumerate(zip(logs["autoencoder"].loss, logs["autoencoder"].best))]
    rows += [{"stage": "features", "step": i, "loss": l, "best": b}
             for i, (l, b) in enumerate(zip(logs["features"].loss, logs["features"].best))]
    _csv(out / "appearance.csv", rows)


def _mesh_from(avatar, cloud, cfg):
    from .recon import reconstruct

    mesh, elapsed = reconstruct(cloud, cfg.psr_resolution, cfg.psr_sigma, return_timing=True)
    if avatar is not None and avatar.has_texture:
        mesh = avatar.color_mesh(mesh, cloud, k=cfg.idw_k, mode=cfg.idw_mode)
    return mesh, elapsed


def cmd_repose(args, cfg):
    from .avatar import load_avatar
    from .io import write_obj, write_ply

    out = _out(args)
    if not args.pose:
        raise UsageError("--pose is required")
    avatar = load_avatar(args.checkpoint)
    pose = _pose(args.pose)
    t0 = time.perf_counter()
    cloud = avatar.repose(pose)
    t_deform = time.perf_counter() - t0
    write_ply(cloud, out / "posed.ply")
    mesh, t_mesh = _mesh_from(avatar, cloud, cfg)
    write_obj(mesh, out / "mesh.obj")
    write_ply(mesh, out / "mesh.ply")
    _csv(out / "repose.csv", [{"points": len(cloud), "faces": len(mesh.faces),
                               "deform_seconds": t_deform, "mesh_seconds": t_mesh}])


def cmd_reconstruct(args, cfg):
    from .io import read_ply, write_obj, write_ply
    from .pointcloud import OrientedPointCloud
    from .recon import reconstruct

    out = _out(args)
    if not args.input:
        raise UsageError("--input is required")
    cloud = read_ply(args.input, require_normals=True)
    if not isinstance(cloud, OrientedPointCloud):
        raise UsageError(f"{args.input} is a mesh, not an oriented point cloud")
    res = args.resolution or cfg.psr_resolution
    sigma = args.sigma if args.sigma is not None else cfg.psr_sigma
    mesh, elapsed = reconstruct(cloud, res, sigma, return_timing=True)
    write_obj(mesh, out / "mesh.obj")
    write_ply(mesh, out / "mesh.ply")
    _csv(out / "reconstruct.csv", [{"points": len(cloud), "resolution": res, "faces": len(mesh.faces),
                                    "watertight": mesh.is_watertight(), "seconds": elapsed}])


def cmd_compose(args, cfg):
    from .avatar import load_avatar, save_avatar
    from .compose import compose
    from .semantic import PartLabel, parse_parts

    out = _out(args)
    if not (args.a and args.b):
        raise UsageError("--a and --b are required")
    try:
        parts = parse_parts(args.parts or "")
    except (KeyError, ValueError) as exc:
        raise UsageError(f"unknown part in --parts: {exc}") from exc
    a, b = load_avatar(args.a), load_avatar(args.b)
    result = compose(a, b, parts, args.mode, k=cfg.idw_k)
    save_avatar(result, out / "avatar.spav")
    census = result.points.census()
    _csv(out / "compose.csv", [{"label": p.name.lower(), "points": int(census[p])} for p in PartLabel])


def cmd_eval(args, cfg):
    from .evaluate import evaluate

    out = _out(args)
    rows = []
    if args.pred and args.gt:
        report = evaluate(_read_mesh(args.pred), _read_mesh(args.gt), seed=cfg.seed)
        rows.append({"pose": "", **report.to_dict()})
    elif args.checkpoint and args.subject:
        from .avatar import load_avatar

        avatar = load_avatar(args.checkpoint)
        subject = _subject(args)
        poses = args.poses if args.poses else list(range(len(subject.poses)))
        for i in poses:
            mesh, _ = _mesh_from(None, avatar.repose(subject.poses[i]), cfg)
            report = evaluate(mesh, subject.scans[i], seed=cfg.seed)
            rows.append({"pose": i, **report.to_dict()})
    else:
        raise UsageError("eval needs --pred and --gt, or --checkpoint and --subject")
    _csv(out / "eval.csv", rows)
    (out / "eval.json").write_text(json.dumps(rows, indent=2))


COMMANDS = {
    "generate": cmd_generate,
    "train-geom": cmd_train_geom,
    "transfer": cmd_transfer,
    "train-appearance": cmd_train_appearance,
    "repose": cmd_repose,
    "reconstruct": cmd_reconstruct,
    "compose": cmd_compose,
    "eval": cmd_eval,
}


def build_parser():
    parser = _Parser(prog="spavatar", description="Point-based animatable avatars.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--paper-scale", action="store_true", help="full-size sampling, networks and grid")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "generate":
            p.add_argument("--poses", type=int, default=8)
        if name in ("train-geom", "transfer", "train-appearance", "eval"):
            p.add_argument("--subject", help="subject.spav written by generate")
        if name in ("transfer", "train-appearance", "repose", "eval"):
            p.add_argument("--checkpoint", required=name != "eval")
        if name == "repose":
            p.add_argument("--pose", required=True, help="pose JSON")
        if name == "reconstruct":
            p.add_argument("--input", required=True, help="oriented point cloud PLY")
            p.add_argument("--resolution", type=int)
            p.add_argument("--sigma", type=float)
        if name == "compose":
            p.add_argument("--a", required=True, help="host avatar checkpoint")
            p.add_argument("--b", required=True, help="donor avatar checkpoint")
            p.add_argument("--parts", default="", help="comma-separated part names")
            p.add_argument("--mode", choices=("texture", "points"), default="texture")
        if name == "eval":
            p.add_argument("--pred")
            p.add_argument("--gt")
            p.add_argument("--poses", type=int, nargs="*")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_usage(sys.stderr)
            raise UsageError("spavatar: error: a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "generate" and args.poses < 2:
            raise UsageError("--poses must be at least 2")
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return USAGE_ERROR
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    except Exception as exc:    # noqa: BLE001 - any failure maps to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"spavatar: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
