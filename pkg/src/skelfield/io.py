"""Readers and writers for the on-disk formats.

OBJ meshes (v/f only), OCCGRID occupancy files, skeleton / targets / rig /
pose / report JSON, SKFW parameter checkpoints and the training loss CSV.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Union

import numpy as np

from .fields import FieldTargets, Skeleton
from .geometry import Mesh, OccupancyGrid
from .rig import Pose, RigModel

PathLike = Union[str, Path]

CHECKPOINT_MAGIC = b"SKFW v1\n"


class FormatError(ValueError):
    pass


# -- meshes -----------------------------------------------------------------

def read_obj(path: PathLike) -> Mesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(tok.split("/")[0]) for tok in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                faces.append([idx[0], idx[k], idx[k + 1]])
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(mesh: Mesh, path: PathLike) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


# -- occupancy grids --------------------------------------------------------

def write_occgrid(grid: OccupancyGrid, path: PathLike) -> None:
    o = [float(x) for x in grid.origin]
    header = f"OCCGRID v1 {grid.resolution} {o[0]!r} {o[1]!r} {o[2]!r} {float(grid.spacing)!r}\n"
    body = (grid.values >= 0.5).astype(np.uint8).tobytes(order="C")
    Path(path).write_bytes(header.encode("ascii") + body)


def read_occgrid(path: PathLike) -> OccupancyGrid:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    tok = raw[:nl].decode("ascii").split()
    if tok[:2] != ["OCCGRID", "v1"] or len(tok) != 7:
        raise FormatError("not an OCCGRID v1 file")
    r = int(tok[2])
    body = np.frombuffer(raw[nl + 1 :], dtype=np.uint8)
    if body.size != r ** 3:
        raise FormatError("OCCGRID payload size mismatch")
    return OccupancyGrid(body.reshape(r, r, r).astype(np.float64), [float(t) for t in tok[3:6]], float(tok[6]))


# -- skeletons, targets -----------------------------------------------------

def skeleton_to_dict(skel: Skeleton) -> dict:
    return {
        "joints": [
            {"id": i, "pos": [float(x) for x in p], "parent": None if q < 0 else int(q)}
            for i, (p, q) in enumerate(zip(skel.positions, skel.parents))
        ],
        "root": int(skel.root),
    }


def skeleton_from_dict(d: Mapping) -> Skeleton:
    joints = sorted(d["joints"], key=lambda j: j["id"])
    index = {j["id"]: i for i, j in enumerate(joints)}
    parents = [None if j["parent"] is None else index[j["parent"]] for j in joints]
    skel = Skeleton(np.array([j["pos"] for j in joints], dtype=np.float64), parents, index[d["root"]])
    skel.validate()
    return skel


def write_skeleton(skel: Skeleton, path: PathLike) -> None:
    Path(path).write_text(json.dumps(skeleton_to_dict(skel), indent=1))


def read_skeleton(path: PathLike) -> Skeleton:
    return skeleton_from_dict(json.loads(Path(path).read_text()))


def write_targets(t: FieldTargets, path: PathLike, points=None) -> None:
    rows = [
        {"joint": float(a), "root": float(b), "bone": float(c), "instance": int(d)}
        for a, b, c, d in zip(t.joint_prob, t.root_prob, t.bone_prob, t.instance)
    ]
    if points is not None:
        for row, p in zip(rows, np.asarray(points, dtype=np.float64)):
            row["p"] = [float(x) for x in p]
    Path(path).write_text(json.dumps(rows))


def read_targets(path: PathLike) -> FieldTargets:
    rows = json.loads(Path(path).read_text())
    return FieldTargets(
        np.array([r["joint"] for r in rows]),
        np.array([r["root"] for r in rows]),
        np.array([r["bone"] for r in rows]),
        np.array([r["instance"] for r in rows], dtype=np.int64),
    )


# -- rigs and poses ---------------------------------------------------------

def write_rig(rig: RigModel, path: PathLike, mesh_path: str) -> None:
    weights = [[[int(j), float(w)] for j, w in enumerate(row) if w > 0] for row in rig.weights]
    d = {"mesh": mesh_path, "skeleton": skeleton_to_dict(rig.skeleton), "weights": weights}
    Path(path).write_text(json.dumps(d))


def read_rig(path: PathLike) -> RigModel:
    path = Path(path)
    d = json.loads(path.read_text())
    mesh_path = Path(d["mesh"])
    if not mesh_path.is_absolute():
        mesh_path = path.parent / mesh_path
    mesh = read_obj(mesh_path)
    skel = skeleton_from_dict(d["skeleton"])
    w = np.zeros((mesh.n_vertices, skel.n_joints))
    for v, row in enumerate(d["weights"]):
        for j, x in row:
            w[v, j] = x
    rig = RigModel(mesh, skel, w)
    rig.validate()
    return rig


def pose_to_dict(pose: Pose, frame: int = 0) -> dict:
    return {
        "frame": frame,
        "rotations": pose.rotations.tolist(),
        "root_t": pose.root_translation.tolist(),
    }


def write_clip(poses: Iterable[Pose], path: PathLike) -> None:
    Path(path).write_text(json.dumps([pose_to_dict(p, i) for i, p in enumerate(poses)]))


def read_clip(path: PathLike) -> List[Pose]:
    frames = json.loads(Path(path).read_text())
    if isinstance(frames, dict):
        frames = [frames]
    frames = sorted(frames, key=lambda f: f.get("frame", 0))
    return [Pose(f["rotations"], f.get("root_t", [0.0, 0.0, 0.0])) for f in frames]


# -- checkpoints and traces -------------------------------------------------

def write_checkpoint(tensors: Mapping[str, np.ndarray], path: PathLike) -> None:
    """SKFW v1: magic line, tensor count, then (name, shape, float64 data) records."""
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # keeps 0-d shapes
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(out))


def read_checkpoint(path: PathLike) -> Dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise FormatError("not an SKFW v1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return out


def write_trace(trace: List[Mapping[str, float]], path: PathLike) -> None:
    cols = ["step", "total", "joint", "root", "bone", "sym", "inst"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in trace:
            w.writerow([row["step"]] + [repr(float(row[c])) for c in cols[1:]])


def read_trace(path: PathLike) -> List[Dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_json(obj, path: PathLike) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
