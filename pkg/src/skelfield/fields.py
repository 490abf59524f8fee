"""Ground-truth joint / root / bone probability fields and instance labels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from .geometry import Array, SampleBatch, point_to_segment

DEFAULT_SIGMA = 0.04


class SkeletonError(ValueError):
    pass


@dataclass
class Skeleton:
    """Joints with positions and parent indices (-1 marks the root)."""

    positions: Array
    parents: Array
    root: int

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.parents = np.array([-1 if p is None else int(p) for p in self.parents], dtype=np.int64)
        self.root = int(self.root)

    @classmethod
    def from_parents(cls, positions, parents: Sequence[Optional[int]]) -> "Skeleton":
        roots = [i for i, p in enumerate(parents) if p is None or p < 0]
        if len(roots) != 1:
            raise SkeletonError("skeleton needs exactly one root")
        return cls(positions, parents, roots[0])

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def n_joints(self) -> int:
        return len(self.positions)

    @property
    def bones(self) -> Array:
        """(child, parent) index pairs."""
        child = np.nonzero(self.parents >= 0)[0]
        return np.stack([child, self.parents[child]], axis=1) if len(child) else np.zeros((0, 2), np.int64)

    def bone_segments(self):
        b = self.bones
        return self.positions[b[:, 0]], self.positions[b[:, 1]]

    def children(self, j: int) -> List[int]:
        return [int(c) for c in np.nonzero(self.parents == j)[0]]

    def depth(self) -> Array:
        d = np.full(self.n_joints, -1, dtype=np.int64)
        for j in range(self.n_joints):
            k, n = j, 0
            while self.parents[k] >= 0:
                k = self.parents[k]
                n += 1
            d[j] = n
        return d

    def topological_order(self) -> List[int]:
        order, stack = [], [self.root]
        while stack:
            j = stack.pop()
            order.append(j)
            stack.extend(reversed(self.children(j)))
        return order

    def validate(self) -> None:
        n = self.n_joints
        if n == 0:
            raise SkeletonError("empty skeleton")
        if not 0 <= self.root < n:
            raise SkeletonError("root index out of range")
        roots = np.nonzero(self.parents < 0)[0]
        if len(roots) != 1 or roots[0] != self.root:
            raise SkeletonError("exactly one parentless joint, equal to root, is required")
        if np.any(self.parents >= n):
            raise SkeletonError("parent index out of range")
        if len(self.topological_order()) != n:
            raise SkeletonError("parent links do not form a tree")

    def transformed(self, fn) -> "Skeleton":
        return Skeleton(fn(self.positions), self.parents.copy(), self.root)


def _gauss(d: Array, sigma: float) -> Array:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return np.exp(-(d ** 2) / (2.0 * sigma ** 2))


def _as_points(p):
    p = np.asarray(p, dtype=np.float64)
    return np.atleast_2d(p), p.ndim == 1


def _joint_dist(positions: Array, pts: Array) -> Array:
    return np.linalg.norm(pts[:, None, :] - positions[None, :, :], axis=2)


def gt_joint_prob(skeleton: Skeleton, p, sigma: float = DEFAULT_SIGMA):
    """exp(-d^2 / 2 sigma^2) with d the distance to the nearest joint."""
    pts, single = _as_points(p)
    val = _gauss(_joint_dist(skeleton.positions, pts).min(axis=1), sigma)
    return float(val[0]) if single else val


def gt_root_prob(skeleton: Skeleton, p, sigma: float = DEFAULT_SIGMA):
    pts, single = _as_points(p)
    d = np.linalg.norm(pts - skeleton.positions[skeleton.root], axis=1)
    val = _gauss(d, sigma)
    return float(val[0]) if single else val


def bone_distance(skeleton: Skeleton, p) -> Array:
    a, b = skeleton.bone_segments()
    if len(a) == 0:
        raise SkeletonError("no bones")
    pts, _ = _as_points(p)
    return point_to_segment(pts, a, b).min(axis=1)


def gt_bone_prob(skeleton: Skeleton, p, sigma: float = DEFAULT_SIGMA):
    """Gaussian of the distance to the nearest bone segment."""
    _, single = _as_points(p)
    val = _gauss(bone_distance(skeleton, p), sigma)
    return float(val[0]) if single else val


def instance_label(skeleton: Skeleton, p):
    """Index of the closest joint; argmin keeps the lowest index on ties."""
    pts, single = _as_points(p)
    lab = np.argmin(_joint_dist(skeleton.positions, pts), axis=1)
    return int(lab[0]) if single else lab


@dataclass
class FieldTargets:
    joint_prob: Array
    root_prob: Array
    bone_prob: Array
    instance: Array

    def __len__(self) -> int:
        return len(self.joint_prob)

    def subset(self, idx) -> "FieldTargets":
        return FieldTargets(self.joint_prob[idx], self.root_prob[idx], self.bone_prob[idx], self.instance[idx])


def build_targets(
    skeleton: Skeleton,
    batch: Union[SampleBatch, Array],
    sigma: float = DEFAULT_SIGMA,
    bone_sigma: Optional[float] = None,
) -> FieldTargets:
    pts = batch.points if isinstance(batch, SampleBatch) else np.atleast_2d(batch)
    return FieldTargets(
        joint_prob=gt_joint_prob(skeleton, pts, sigma),
        root_prob=gt_root_prob(skeleton, pts, sigma),
        bone_prob=gt_bone_prob(skeleton, pts, sigma if bone_sigma is None else bone_sigma),
        instance=instance_label(skeleton, pts),
    )
