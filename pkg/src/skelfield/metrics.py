"""Skeleton comparison metrics: joint-to-joint, joint-to-bone, bone-to-bone."""

from __future__ import annotations

from typing import Dict

import numpy as np

from .fields import Skeleton
from .geometry import chamfer_l1, point_to_segment

BONE_SAMPLES = 32


class MetricError(ValueError):
    pass


def bone_samples(skel: Skeleton, per_bone: int = BONE_SAMPLES) -> np.ndarray:
    a, b = skel.bone_segments()
    if len(a) == 0:
        raise MetricError("skeleton has no bones")
    t = np.linspace(0.0, 1.0, per_bone)[None, :, None]
    return (a[:, None, :] + t * (b - a)[:, None, :]).reshape(-1, 3)


def cd_j2j(pred: Skeleton, truth: Skeleton) -> float:
    return chamfer_l1(pred.positions, truth.positions)


def cd_b2b(pred: Skeleton, truth: Skeleton, per_bone: int = BONE_SAMPLES) -> float:
    return chamfer_l1(bone_samples(pred, per_bone), bone_samples(truth, per_bone))


def _joints_to_bones(joints: np.ndarray, skel: Skeleton) -> float:
    a, b = skel.bone_segments()
    if len(a) == 0:
        raise MetricError("skeleton has no bones")
    return float(point_to_segment(joints, a, b).min(axis=1).mean())


def cd_j2b(pred: Skeleton, truth: Skeleton) -> float:
    """Mean of the two directed joint-to-nearest-bone distances."""
    return 0.5 * (_joints_to_bones(pred.positions, truth) + _joints_to_bones(truth.positions, pred))


def skeleton_metrics(pred: Skeleton, truth: Skeleton, per_bone: int = BONE_SAMPLES) -> Dict[str, float]:
    return {
        "cd_j2j": cd_j2j(pred, truth),
        "cd_j2b": cd_j2b(pred, truth),
        "cd_b2b": cd_b2b(pred, truth, per_bone),
    }
