"""Procedural rigged shapes (table, chair, lamp, airplane-like cross).

Shapes are unions of axis-aligned boxes whose faces may touch but whose
volumes never overlap, so ray parity classifies the union correctly.
Joints sit at part intersections, with the root at the center of the main
support part (seat, top, base, fuselage).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .fields import Skeleton
from .geometry import Mesh, normalize_mesh

FAMILIES = ("table", "chair", "lamp", "cross")

_DEFAULTS: Dict[str, Dict[str, float]] = {
    "table": {"width": 1.0, "depth": 0.6, "height": 0.7, "top": 0.08, "leg": 0.08},
    "chair": {"width": 0.5, "depth": 0.5, "seat_height": 0.45, "seat": 0.08, "back_height": 0.47, "leg": 0.06},
    "lamp": {"base": 0.4, "base_height": 0.06, "pole": 0.06, "pole_height": 0.74, "arm": 0.43, "shade": 0.2},
    "cross": {"length": 1.0, "body": 0.1, "span": 0.9, "chord": 0.2, "wing": 0.06},
}


@dataclass
class SynthShapeSpec:
    family: str
    params: Dict[str, float] = field(default_factory=dict)
    jitter: float = 0.05
    edge_length: float = 0.1

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        unknown = set(self.params) - set(_DEFAULTS[self.family])
        if unknown:
            raise ValueError(f"unknown parameters for {self.family}: {sorted(unknown)}")


def box_mesh(lo, hi, edge_length: float = 0.1) -> Mesh:
    """Closed, outward-wound box with faces subdivided to about edge_length."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    n = np.maximum(1, np.ceil((hi - lo) / edge_length).astype(int))
    verts: List[np.ndarray] = []
    tris: List[np.ndarray] = []
    count = 0
    for axis in range(3):
        u, v = (axis + 1) % 3, (axis + 2) % 3
        su = np.linspace(lo[u], hi[u], n[u] + 1)
        sv = np.linspace(lo[v], hi[v], n[v] + 1)
        gu, gv = np.meshgrid(su, sv, indexing="ij")
        for side, coord in ((1, hi[axis]), (-1, lo[axis])):
            p = np.zeros((gu.size, 3))
            p[:, u] = gu.ravel()
            p[:, v] = gv.ravel()
            p[:, axis] = coord
            i, j = np.meshgrid(np.arange(n[u]), np.arange(n[v]), indexing="ij")
            i, j = i.ravel(), j.ravel()
            a = i * (n[v] + 1) + j
            b = (i + 1) * (n[v] + 1) + j
            c = (i + 1) * (n[v] + 1) + j + 1
            d = i * (n[v] + 1) + j + 1
            t = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
            if side < 0:
                t = t[:, ::-1]
            verts.append(p)
            tris.append(t + count)
            count += len(p)
    vv = np.concatenate(verts)
    tt = np.concatenate(tris)
    # weld the shared edge vertices of adjacent faces
    uniq, inv = np.unique(np.round(vv, 12), axis=0, return_inverse=True)
    return Mesh(uniq, inv.reshape(-1)[tt])


def merge_meshes(meshes: Sequence[Mesh]) -> Mesh:
    verts, tris, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + off)
        off += m.n_vertices
    return Mesh(np.concatenate(verts), np.concatenate(tris))


def _params(spec: SynthShapeSpec, seed: int) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    base = dict(_DEFAULTS[spec.family])
    base.update(spec.params)
    names = sorted(base)
    scale = rng.uniform(1 - spec.jitter, 1 + spec.jitter, len(names))
    return {k: base[k] * s for k, s in zip(names, scale)}


def _table(p) -> Tuple[list, list, list]:
    w, d, h, t, l = p["width"], p["depth"], p["height"], p["top"], p["leg"]
    boxes = [([-w / 2, -d / 2, h - t], [w / 2, d / 2, h])]
    joints = [[0.0, 0.0, h - t / 2]]
    parents = [None]
    for sx in (-1, 1):
        for sy in (-1, 1):
            cx, cy = sx * (w / 2 - l), sy * (d / 2 - l)
            boxes.append(([cx - l / 2, cy - l / 2, 0.0], [cx + l / 2, cy + l / 2, h - t]))
            joints.append([cx, cy, h - t / 2])
            parents.append(0)
    return boxes, joints, parents


def _chair(p):
    w, d, sh, st, bh, l = p["width"], p["depth"], p["seat_height"], p["seat"], p["back_height"], p["leg"]
    top = sh + st
    back_t = 0.16 * d
    boxes = [
        ([-w / 2, -d / 2, sh], [w / 2, d / 2, top]),
        ([-w / 2, -d / 2, top], [w / 2, -d / 2 + back_t, top + bh]),
    ]
    mid = sh + st / 2
    joints = [[0.0, 0.0, mid], [0.0, -d / 2 + back_t / 2, mid]]
    parents = [None, 0]
    for sx in (-1, 1):
        for sy in (-1, 1):
            cx = sx * (w / 2 - l / 2 - 0.01)
            cy = sy * (d / 2 - l / 2 - 0.01)
            boxes.append(([cx - l / 2, cy - l / 2, 0.0], [cx + l / 2, cy + l / 2, sh]))
            joints.append([cx, cy, mid])
            parents.append(0)
    return boxes, joints, parents


def _lamp(p):
    b, bh, pw, ph, arm, sh = p["base"], p["base_height"], p["pole"], p["pole_height"], p["arm"], p["shade"]
    top = bh + ph
    boxes = [
        ([-b / 2, -b / 2, 0.0], [b / 2, b / 2, bh]),
        ([-pw / 2, -pw / 2, bh], [pw / 2, pw / 2, top]),
        ([-pw / 2, -pw / 2, top], [arm - pw / 2, pw / 2, top + pw]),
        ([arm - pw / 2 - sh / 2, -sh / 2, top - 0.7 * sh], [arm - pw / 2 + sh / 2, sh / 2, top]),
    ]
    arm_mid = top + pw / 2
    joints = [
        [0.0, 0.0, bh / 2],
        [0.0, 0.0, bh + ph / 2],
        [0.0, 0.0, arm_mid],
        [arm - pw / 2 - 0.04, 0.0, arm_mid],
    ]
    parents = [None, 0, 1, 2]
    return boxes, joints, parents


def _cross(p):
    L, bw, span, chord, wt = p["length"], p["body"], p["span"], p["chord"], p["wing"]
    boxes = [
        ([-L / 2, -bw / 2, -bw / 2], [L / 2, bw / 2, bw / 2]),
        ([-chord / 2, bw / 2, -wt / 2], [chord / 2, span / 2, wt / 2]),
        ([-chord / 2, -span / 2, -wt / 2], [chord / 2, -bw / 2, wt / 2]),
    ]
    inset = 0.08
    joints = [
        [0.0, 0.0, 0.0],
        [L / 2 - inset, 0.0, 0.0],
        [-L / 2 + inset, 0.0, 0.0],
        [0.0, span / 2 - inset, 0.0],
        [0.0, -span / 2 + inset, 0.0],
    ]
    parents = [None, 0, 0, 0, 0]
    return boxes, joints, parents


_BUILDERS = {"table": _table, "chair": _chair, "lamp": _lamp, "cross": _cross}


def synth(spec: SynthShapeSpec, seed: int = 0) -> Tuple[Mesh, Skeleton]:
    """Watertight mesh and annotated skeleton, both in normalized space."""
    boxes, joints, parents = _BUILDERS[spec.family](_params(spec, seed))
    mesh = merge_meshes([box_mesh(lo, hi, spec.edge_length) for lo, hi in boxes])
    mesh, tf = normalize_mesh(mesh)
    skel = Skeleton.from_parents(tf.apply(np.asarray(joints)), parents)
    return mesh, skel


def template_skeleton(family: str) -> Skeleton:
    """Skeleton of a family's undeformed template (no jitter)."""
    return synth(SynthShapeSpec(family, jitter=0.0))[1]
