"""End-to-end driver: mesh in, rig and metric report out.

Every stage runs on the normalized mesh so that all length parameters
(sigma, bands, radii) mean the same thing for any input scale.  The
skeleton and rig written to disk are mapped back to input coordinates;
metrics are reported in normalized units.
"""

from __future__ import annotations

import contextlib
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Union

import numpy as np

from . import io
from .config import PipelineConfig
from .fields import Skeleton, gt_bone_prob, gt_joint_prob, gt_root_prob, instance_label
from .geometry import Mesh, normalize_mesh, sample_interior, voxelize
from .metrics import skeleton_metrics
from .neural import SkeletonFieldNet, predict_fields, model_tensors, train
from .rig import RigModel, compute_skinning
from .skeleton import skeleton_from_fields

logger = logging.getLogger(__name__)

METRIC_KEYS = ("cd_j2j", "cd_j2b", "cd_b2b")


class PipelineError(RuntimeError):
    """A stage failed; `stage` names it and `cause` holds the original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


class EvaluationError(ValueError):
    pass


@contextlib.contextmanager
def stage(name: str) -> Iterator[None]:
    logger.debug("stage %s", name)
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, exc) from exc


@dataclass
class PipelineResult:
    skeleton: Skeleton  # input coordinates
    rig: RigModel  # input coordinates
    report: dict
    model: Optional[SkeletonFieldNet] = None
    trace: List[Dict[str, float]] = field(default_factory=list)


def oracle_fields(truth: Skeleton, points: np.ndarray, sigma: float):
    """Ground-truth field values at points, with one-hot instance embeddings."""
    emb = np.eye(truth.n_joints)[instance_label(truth, points)]
    return (gt_joint_prob(truth, points, sigma), emb,
            lambda q: gt_root_prob(truth, q, sigma), lambda q: gt_bone_prob(truth, q, sigma))


def learned_fields(model: SkeletonFieldNet, grid, points: np.ndarray):
    out = predict_fields(model, grid, points)
    return (out["joint"], out["embed"],
            lambda q: predict_fields(model, grid, q)["root"], lambda q: predict_fields(model, grid, q)["bone"])


def run_pipeline(cfg: PipelineConfig, mesh: Mesh, truth: Optional[Skeleton] = None, oracle: bool = True,
                 model: Optional[SkeletonFieldNet] = None, out_dir: Union[str, Path, None] = None,
                 name: str = "shape") -> PipelineResult:
    """Run every stage on one mesh.

    oracle=True uses ground-truth fields built from `truth`.  Otherwise the
    fields come from `model`; when no model is given one is trained on this
    mesh and `truth` first.
    """
    with stage("normalize"):
        mesh.validate()
        norm, sim = normalize_mesh(mesh)
        truth_n = truth.transformed(sim.apply) if truth is not None else None
        if truth_n is not None:
            truth_n.validate()

    with stage("voxelize"):
        occ = voxelize(norm, cfg.voxel_resolution)

    trace: List[Dict[str, float]] = []
    tcfg = cfg.train_config()
    if not oracle and model is None:
        with stage("train"):
            if truth_n is None:
                raise ValueError("training needs an annotated skeleton")
            result = train([norm], [truth_n], tcfg)
            model, trace = result.model, result.trace

    with stage("fields"):
        rng = np.random.default_rng(cfg.seed)
        points = sample_interior(norm, cfg.meanshift.n_seeds, rng)
        if oracle:
            if truth_n is None:
                raise ValueError("oracle mode needs an annotated skeleton")
            joint, emb, root_fn, bone_fn = oracle_fields(truth_n, points, cfg.sigma)
        else:
            grid = voxelize(norm, tcfg.grid_resolution, tcfg.grid_bounds)
            joint, emb, root_fn, bone_fn = learned_fields(model, grid, points)

    with stage("extract"):
        skel_n = skeleton_from_fields(points, joint, emb, root_fn, bone_fn, cfg.meanshift,
                                      cfg.edge_samples, cfg.edge_eps, cfg.occlusion_radius)

    with stage("rig"):
        rig_n = compute_skinning(norm, skel_n, sigma=cfg.sigma, rounds=cfg.rig.rounds, band=cfg.rig.band)
        skel = skel_n.transformed(sim.inverse)
        rig = RigModel(mesh, skel, rig_n.weights)

    report = {
        "name": name,
        "mode": "oracle" if oracle else "trained",
        "seed": cfg.seed,
        "n_joints": skel.n_joints,
        "root": int(skel.root),
        "occupancy": float(occ.values.mean()),
        "watertight_warning": bool(occ.watertight_warning),
    }
    if truth_n is not None:
        with stage("metrics"):
            report["metrics"] = skeleton_metrics(skel_n, truth_n, cfg.bone_samples)
            report["truth_joints"] = truth_n.n_joints
    if trace:
        report["final_loss"] = trace[-1]["total"]

    if out_dir is not None:
        with stage("write"):
            write_outputs(Path(out_dir), mesh, rig, report, model if not oracle else None, trace)
    return PipelineResult(skel, rig, report, model, trace)


def write_outputs(out: Path, mesh: Mesh, rig: RigModel, report: dict,
                  model: Optional[SkeletonFieldNet], trace: List[Dict[str, float]]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    io.write_obj(mesh, out / "mesh.obj")
    io.write_skeleton(rig.skeleton, out / "skeleton.json")
    io.write_rig(rig, out / "rig.json", "mesh.obj")
    io.write_json(report, out / "report.json")
    if model is not None:
        io.write_checkpoint(model_tensors(model), out / "checkpoint.skfw")
    if trace:
        io.write_trace(trace, out / "trace.csv")


# -- evaluation ---------------------------------------------------------------

def _load_any_skeleton(path: Path) -> Skeleton:
    d = json.loads(path.read_text())
    return io.skeleton_from_dict(d["skeleton"] if "skeleton" in d else d)


def collect_skeletons(root: Union[str, Path]) -> Dict[str, Path]:
    """Map shape name -> skeleton file.

    A directory holds either `<name>.json` files (skeleton or rig JSON) or
    `<name>/skeleton.json` subdirectories.
    """
    root = Path(root)
    if not root.is_dir():
        raise EvaluationError(f"not a directory: {root}")
    found = {p.stem: p for p in root.glob("*.json")}
    for sub in root.iterdir():
        if sub.is_dir() and (sub / "skeleton.json").exists():
            found[sub.name] = sub / "skeleton.json"
    return dict(sorted(found.items()))


def evaluate(pred_dir: Union[str, Path], truth_dir: Union[str, Path], bone_samples: int = 32) -> dict:
    """Per-shape and mean skeleton metrics over name-matched files."""
    pred = collect_skeletons(pred_dir)
    truth = collect_skeletons(truth_dir)
    missing = sorted(set(pred) ^ set(truth))
    if missing:
        raise EvaluationError("unmatched shapes: " + ", ".join(missing))
    if not pred:
        raise EvaluationError("no shapes found")
    shapes = {name: skeleton_metrics(_load_any_skeleton(pred[name]), _load_any_skeleton(truth[name]), bone_samples)
              for name in pred}
    mean = {k: float(np.mean([m[k] for m in shapes.values()])) for k in METRIC_KEYS}
    return {"shapes": shapes, "mean": mean}


def format_table(report: dict) -> str:
    rows = [("shape",) + METRIC_KEYS]
    rows += [(name,) + tuple(f"{m[k]:.6f}" for k in METRIC_KEYS) for name, m in report["shapes"].items()]
    rows.append(("mean",) + tuple(f"{report['mean'][k]:.6f}" for k in METRIC_KEYS))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def with_seed(cfg: PipelineConfig, seed: Optional[int]) -> PipelineConfig:
    return cfg if seed is None else dataclasses.replace(cfg, seed=seed)
