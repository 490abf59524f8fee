"""Command-line entry point: one subcommand per stage plus the full pipeline.

A "shape directory" holds mesh.obj and, when annotated, skeleton.json;
`synth` and `pipeline` both write this layout.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence


from . import config as config_mod
from . import io
from .config import PipelineConfig
from .fields import build_targets
from .geometry import normalize_mesh, sample_points, voxelize
from .neural import NumericalError, build_model, load_tensors, model_tensors, train
from .pipeline import PipelineError, evaluate, format_table, run_pipeline, with_seed
from .rig import apply_pose, compute_skinning, RigModel
from .synth import FAMILIES, SynthShapeSpec, synth

logger = logging.getLogger("skelfield")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


def _load_shape(path: Path, need_skeleton: bool = False):
    path = Path(path)
    mesh_path = path / "mesh.obj" if path.is_dir() else path
    mesh = io.read_obj(mesh_path)
    skel_path = mesh_path.parent / "skeleton.json"
    skel = io.read_skeleton(skel_path) if skel_path.exists() else None
    if need_skeleton and skel is None:
        raise ValueError(f"{skel_path} not found")
    return mesh, skel


def _load_model(cfg: PipelineConfig, path: Path):
    return load_tensors(build_model(cfg.train_config()), io.read_checkpoint(path))


def cmd_synth(args, cfg: PipelineConfig) -> int:
    params = {}
    for item in args.param or []:
        key, _, value = item.partition("=")
        params[key] = float(value)
    mesh, skel = synth(SynthShapeSpec(args.family, params), cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_obj(mesh, out / "mesh.obj")
    io.write_skeleton(skel, out / "skeleton.json")
    print(f"{args.family}: {mesh.n_vertices} vertices, {skel.n_joints} joints -> {out}")
    return EXIT_OK


def cmd_voxelize(args, cfg: PipelineConfig) -> int:
    mesh, _ = _load_shape(args.mesh)
    norm, _ = normalize_mesh(mesh)
    grid = voxelize(norm, args.resolution or cfg.voxel_resolution)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_occgrid(grid, out / "grid.occ")
    if grid.watertight_warning:
        logger.warning("ray-parity axes disagree; mesh may not be watertight")
    print(f"occupancy {grid.values.mean():.4f} -> {out / 'grid.occ'}")
    return EXIT_OK


def cmd_fields(args, cfg: PipelineConfig) -> int:
    mesh, skel = _load_shape(args.shape, need_skeleton=True)
    norm, sim = normalize_mesh(mesh)
    skel = skel.transformed(sim.apply)
    batch = sample_points(norm, args.samples or cfg.n_samples, cfg.band, cfg.seed)
    targets = build_targets(skel, batch, cfg.sigma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_targets(targets, out / "targets.json", batch.points)
    print(f"{len(batch.points)} samples -> {out / 'targets.json'}")
    return EXIT_OK


def cmd_train(args, cfg: PipelineConfig) -> int:
    meshes, skels = [], []
    for d in args.shapes:
        mesh, skel = _load_shape(d, need_skeleton=True)
        norm, sim = normalize_mesh(mesh)
        meshes.append(norm)
        skels.append(skel.transformed(sim.apply))
    result = train(meshes, skels, cfg.train_config())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_checkpoint(model_tensors(result.model), out / "checkpoint.skfw")
    io.write_trace(result.trace, out / "trace.csv")
    if result.trace:
        print(f"final loss {result.trace[-1]['total']:.6g} -> {out}")
    return EXIT_OK


def _run(args, cfg: PipelineConfig, out_dir: Optional[Path]):
    oracle = args.oracle or args.checkpoint is None and not args.train
    mesh, skel = _load_shape(args.shape, need_skeleton=oracle or args.train)
    model = _load_model(cfg, args.checkpoint) if args.checkpoint else None
    return run_pipeline(cfg, mesh, skel, oracle=oracle, model=model, out_dir=out_dir, name=Path(args.shape).stem)


def cmd_extract(args, cfg: PipelineConfig) -> int:
    result = _run(args, cfg, None)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_skeleton(result.skeleton, out / "skeleton.json")
    print(f"{result.skeleton.n_joints} joints -> {out / 'skeleton.json'}")
    return EXIT_OK


def cmd_pipeline(args, cfg: PipelineConfig) -> int:
    result = _run(args, cfg, Path(args.out))
    metrics = result.report.get("metrics")
    summary = " ".join(f"{k}={v:.5f}" for k, v in metrics.items()) if metrics else "no reference skeleton"
    print(f"{result.report['n_joints']} joints, {summary} -> {args.out}")
    return EXIT_OK


def cmd_rig(args, cfg: PipelineConfig) -> int:
    mesh = io.read_obj(args.mesh)
    skel = io.read_skeleton(args.skeleton)
    norm, sim = normalize_mesh(mesh)
    rig_n = compute_skinning(norm, skel.transformed(sim.apply), sigma=cfg.sigma,
                             rounds=cfg.rig.rounds, band=cfg.rig.band)
    rig = RigModel(mesh, skel, rig_n.weights)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_obj(mesh, out / "mesh.obj")
    io.write_rig(rig, out / "rig.json", "mesh.obj")
    print(f"rig with {skel.n_joints} joints -> {out / 'rig.json'}")
    return EXIT_OK


def cmd_pose(args, cfg: PipelineConfig) -> int:
    rig = io.read_rig(args.rig)
    poses = io.read_clip(args.clip)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, pose in enumerate(poses):
        io.write_obj(apply_pose(rig, pose), out / f"frame_{i:04d}.obj")
    print(f"{len(poses)} frames -> {out}")
    return EXIT_OK


def cmd_eval(args, cfg: PipelineConfig) -> int:
    report = evaluate(args.pred, args.truth, cfg.bone_samples)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(report, out / "eval.json")
    print(format_table(report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's unset flags from clobbering ones given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", type=Path, help="INI file overriding the defaults")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="skelfield", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--dump-defaults", action="store_true", help="print the default configuration and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", parents=[common], help="generate a procedural rigged shape")
    p.add_argument("family", choices=FAMILIES)
    p.add_argument("--param", action="append", metavar="KEY=VALUE", help="size parameter override")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("voxelize", parents=[common], help="occupancy grid of a normalized mesh")
    p.add_argument("mesh", type=Path, help="OBJ file or shape directory")
    p.add_argument("--resolution", type=int)
    p.set_defaults(func=cmd_voxelize)

    p = sub.add_parser("fields", parents=[common], help="ground-truth field targets at sampled points")
    p.add_argument("shape", type=Path)
    p.add_argument("--samples", type=int)
    p.set_defaults(func=cmd_fields)

    p = sub.add_parser("train", parents=[common], help="fit the field decoder to annotated shapes")
    p.add_argument("shapes", nargs="+", type=Path)
    p.set_defaults(func=cmd_train)

    for name, func, text in (("extract", cmd_extract, "extract a skeleton"),
                             ("pipeline", cmd_pipeline, "run every stage and write a report")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("shape", type=Path)
        mode = p.add_mutually_exclusive_group()
        mode.add_argument("--oracle", action="store_true", help="use ground-truth fields")
        mode.add_argument("--checkpoint", type=Path, help="use a trained decoder")
        mode.add_argument("--train", action="store_true", help="train a decoder on this shape first")
        p.set_defaults(func=func)

    p = sub.add_parser("rig", parents=[common], help="skinning weights for a mesh and skeleton")
    p.add_argument("mesh", type=Path)
    p.add_argument("skeleton", type=Path)
    p.set_defaults(func=cmd_rig)

    p = sub.add_parser("pose", parents=[common], help="apply a pose clip to a rig")
    p.add_argument("rig", type=Path)
    p.add_argument("clip", type=Path)
    p.set_defaults(func=cmd_pose)

    p = sub.add_parser("eval", parents=[common], help="compare predicted and reference skeletons")
    p.add_argument("pred", type=Path)
    p.add_argument("truth", type=Path)
    p.set_defaults(func=cmd_eval)
    return parser


def _exit_code(exc: BaseException) -> int:
    cause = exc.cause if isinstance(exc, PipelineError) else exc
    return EXIT_NUMERICAL if isinstance(cause, (NumericalError, FloatingPointError)) else EXIT_VALIDATION


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("config", "seed", "out", "verbose"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.dump_defaults:
        sys.stdout.write(config_mod.dumps(PipelineConfig()))
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_VALIDATION
    try:
        cfg = config_mod.load(args.config) if args.config else PipelineConfig()
        cfg = with_seed(cfg, args.seed)
        if args.out is None:
            args.out = cfg.out
        return args.func(args, cfg)
    except (ValueError, OSError, KeyError, PipelineError, NumericalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
