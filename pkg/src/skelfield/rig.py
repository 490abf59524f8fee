"""Skinning weights from part segmentation, forward kinematics and LBS."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix, diags, identity
from scipy.spatial.transform import Rotation

from .fields import DEFAULT_SIGMA, Skeleton, instance_label
from .geometry import Mesh, point_to_segment


class RigError(ValueError):
    pass


@dataclass
class RigModel:
    mesh: Mesh
    skeleton: Skeleton
    weights: np.ndarray  # (V, J) dense, rows sum to 1

    def validate(self, tol: float = 1e-6) -> None:
        w = self.weights
        if w.shape != (self.mesh.n_vertices, self.skeleton.n_joints):
            raise RigError("weight matrix shape does not match mesh and skeleton")
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1) > tol):
            raise RigError("skinning weights must be a partition of unity")


@dataclass
class Pose:
    rotations: np.ndarray  # (J, 4) unit quaternions, (x, y, z, w)
    root_translation: np.ndarray

    def __post_init__(self) -> None:
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(-1, 4)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)
        if np.any(np.abs(np.linalg.norm(self.rotations, axis=1) - 1) > 1e-6):
            raise RigError("pose rotations must be unit quaternions")

    @classmethod
    def identity(cls, n_joints: int) -> "Pose":
        q = np.zeros((n_joints, 4))
        q[:, 3] = 1
        return cls(q, np.zeros(3))

    def matrices(self) -> np.ndarray:
        return Rotation.from_quat(self.rotations).as_matrix()


def _adjacency(mesh: Mesh):
    e = mesh.edges()
    n = mesh.n_vertices
    a = coo_matrix((np.ones(2 * len(e)), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(n, n))
    return a.tocsr()


def _split_parts(verts: np.ndarray, joints: np.ndarray, labels: np.ndarray, radius: float) -> np.ndarray:
    """Split parts that hold several joints by nearest-joint relabeling."""
    out = np.empty_like(labels)
    next_id = 0
    for p in np.unique(labels):
        idx = np.nonzero(labels == p)[0]
        d = np.linalg.norm(verts[idx, None, :] - joints[None, :, :], axis=2)
        inner = np.nonzero(d.min(axis=0) < radius)[0]
        if len(inner) >= 2:
            sub = np.argmin(d[:, inner], axis=1)
            out[idx] = next_id + sub
            next_id += len(inner)
        else:
            out[idx] = next_id
            next_id += 1
    return out


def control_joint(center: np.ndarray, skeleton: Skeleton, depth: Optional[np.ndarray] = None,
                  tol: float = 1e-6) -> int:
    """Joint closest to center; near-ties go to the joint nearest the root."""
    d = np.linalg.norm(skeleton.positions - center, axis=1)
    tied = np.nonzero(d <= d.min() + tol)[0]
    if len(tied) == 1:
        return int(tied[0])
    depth = skeleton.depth() if depth is None else depth
    return int(min(tied, key=lambda j: (depth[j], j)))


def compute_skinning(mesh: Mesh, skeleton: Skeleton, parts: Optional[np.ndarray] = None,
                     sigma: float = DEFAULT_SIGMA, rounds: int = 10, band: float = 0.05) -> RigModel:
    """Bind each part to its control joint, then smooth near part boundaries.

    Without `parts`, vertices are labeled by their nearest joint.
    """
    if skeleton.n_joints == 0:
        raise RigError("empty joint set")
    verts = mesh.vertices
    if parts is None:
        labels = np.atleast_1d(instance_label(skeleton, verts))
    else:
        labels = np.asarray(parts)
        if labels.shape != (mesh.n_vertices,) or np.any(labels < 0):
            raise RigError("every vertex needs a part label")
    labels = _split_parts(verts, skeleton.positions, labels, 2 * sigma)

    depth = skeleton.depth()
    w = np.zeros((mesh.n_vertices, skeleton.n_joints))
    for p in np.unique(labels):
        idx = labels == p
        w[idx, control_joint(verts[idx].mean(axis=0), skeleton, depth)] = 1.0

    edges = mesh.edges()
    cut = edges[labels[edges[:, 0]] != labels[edges[:, 1]]]
    if rounds > 0 and len(cut):
        d = point_to_segment(verts, verts[cut[:, 0]], verts[cut[:, 1]]).min(axis=1)
        in_band = d <= band
        a = _adjacency(mesh) + identity(mesh.n_vertices, format="csr")
        avg = diags(1.0 / np.asarray(a.sum(axis=1)).ravel()) @ a
        for _ in range(rounds):
            w[in_band] = (avg @ w)[in_band]
            w[in_band] /= w[in_band].sum(axis=1, keepdims=True)
    return RigModel(mesh, skeleton, w)


def _translation(t: np.ndarray) -> np.ndarray:
    m = np.eye(4)
    m[:3, 3] = t
    return m


def rest_transforms(skeleton: Skeleton) -> np.ndarray:
    out = np.tile(np.eye(4), (skeleton.n_joints, 1, 1))
    out[:, :3, 3] = skeleton.positions
    return out


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> np.ndarray:
    """Global (J, 4, 4) transforms; each joint rotates about its rest position.

    global(j) = global(parent) @ T(rest offset) @ R(j); the root's offset is
    its rest position plus the pose's root translation.
    """
    if len(pose.rotations) != skeleton.n_joints:
        raise RigError("pose must cover every joint")
    rot = pose.matrices()
    g = np.zeros((skeleton.n_joints, 4, 4))
    for j in skeleton.topological_order():
        local = np.eye(4)
        local[:3, :3] = rot[j]
        p = skeleton.parents[j]
        if p < 0:
            g[j] = _translation(skeleton.positions[j] + pose.root_translation) @ local
        else:
            g[j] = g[p] @ _translation(skeleton.positions[j] - skeleton.positions[p]) @ local
    return g


def apply_pose(rig: RigModel, pose: Pose) -> Mesh:
    """Linear blend skinning: v' = sum_j w_vj G_j B_j^-1 v."""
    g = forward_kinematics(rig.skeleton, pose)
    rel = g @ np.linalg.inv(rest_transforms(rig.skeleton))
    v = rig.mesh.vertices
    moved = np.einsum("jab,vb->jva", rel[:, :3, :3], v) + rel[:, None, :3, 3]
    out = np.einsum("vj,jva->va", rig.weights, moved)
    return Mesh(out, rig.mesh.triangles.copy())
