"""Shared geometric substrate: meshes, occupancy lattices, distances, sampling.

All shapes live in a normalized model space (bounding box centered at the
origin, longest side 1) so that widths and thresholds elsewhere are scale-free.

Inside/outside classification uses axis-aligned ray parity.  Ties (rays that
hit an edge or a vertex of the projected triangulation exactly) are resolved
with an orientation-independent top-left rule, which amounts to a fixed
infinitesimal perturbation of the ray; a watertight surface therefore always
produces an even number of crossings per full ray.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

Array = np.ndarray

AXES = ("x", "y", "z")

# Rays x triangles evaluated per chunk when classifying points.
_CHUNK = 2_000_000


class GeometryError(ValueError):
    """Invalid geometric input (empty sets, mismatched lattices, ...)."""


@dataclass
class Mesh:
    vertices: Array
    triangles: Array

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def triangle_areas(self) -> Array:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def face_normals(self) -> Array:
        v = self.vertices[self.triangles]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def bounds(self) -> Tuple[Array, Array]:
        if self.n_vertices == 0:
            raise GeometryError("empty geometry")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def validate(self) -> None:
        if self.n_vertices == 0 or len(self.triangles) == 0:
            raise GeometryError("empty geometry")
        if self.triangles.min() < 0 or self.triangles.max() >= self.n_vertices:
            raise GeometryError("triangle index out of range")
        if np.any(self.triangle_areas() <= 1e-12):
            raise GeometryError("degenerate triangle")

    def edges(self) -> Array:
        """Unique undirected edges as sorted index pairs."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def transformed(self, fn) -> "Mesh":
        return Mesh(fn(self.vertices), self.triangles.copy())


@dataclass(frozen=True)
class Similarity:
    """x' = scale * (x + translation)."""

    scale: float
    translation: Array

    def apply(self, points: Array) -> Array:
        return self.scale * (np.asarray(points, dtype=np.float64) + self.translation)

    def inverse(self, points: Array) -> Array:
        return np.asarray(points, dtype=np.float64) / self.scale - self.translation

    def is_identity(self, tol: float = 1e-12) -> bool:
        return abs(self.scale - 1.0) <= tol and bool(np.all(np.abs(self.translation) <= tol))


def normalize_mesh(mesh: Mesh) -> Tuple[Mesh, Similarity]:
    """Center the bounding box at the origin and scale its longest side to 1."""
    if mesh.n_vertices == 0:
        raise GeometryError("empty geometry")
    lo, hi = mesh.bounds()
    extent = float(np.max(hi - lo))
    if extent <= 0:
        raise GeometryError("empty geometry")
    tf = Similarity(scale=1.0 / extent, translation=-(lo + hi) / 2.0)
    return mesh.transformed(tf.apply), tf


# ---------------------------------------------------------------------------
# Ray parity
# ---------------------------------------------------------------------------

def _axis_frame(axis: int) -> Tuple[int, int]:
    # (u, v) chosen so that (u, v, axis) is a cyclic permutation
    return (axis + 1) % 3, (axis + 2) % 3


def _edge_fn(p0: Array, p1: Array, q: Array) -> Tuple[Array, Array]:
    """Signed edge function of 2D points q against directed edges p0->p1.

    Arguments broadcast over leading dimensions.  Returns the edge values
    and whether a zero value counts as inside for that directed edge.  The
    value is computed from lexicographically ordered endpoints so the two
    directions of a shared edge give exactly opposite signs.
    """
    swap = (p0[..., 0] > p1[..., 0]) | ((p0[..., 0] == p1[..., 0]) & (p0[..., 1] > p1[..., 1]))
    lo = np.where(swap[..., None], p1, p0)
    hi = np.where(swap[..., None], p0, p1)
    d = hi - lo
    val = d[..., 0] * (q[..., 1] - lo[..., 1]) - d[..., 1] * (q[..., 0] - lo[..., 0])
    val = np.where(swap, -val, val)
    dd = p1 - p0
    inclusive = (dd[..., 1] < 0) | ((dd[..., 1] == 0) & (dd[..., 0] < 0))
    return val, inclusive


def _ray_hits(tri: Array, axis: int, q2: Array) -> Tuple[Array, Array]:
    """Crossings of rays parallel to `axis` through 2D points q2.

    tri (..., 3, 3) and q2 (..., 2) broadcast against each other.  Returns
    (hit mask, hit height along the axis).
    """
    u, v = _axis_frame(axis)
    a = tri[..., 0, :][..., [u, v]]
    b = tri[..., 1, :][..., [u, v]]
    c = tri[..., 2, :][..., [u, v]]
    area = (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])
    keep = area != 0
    # orient every projected triangle counter-clockwise
    flip = area < 0
    b2 = np.where(flip[..., None], c, b)
    c2 = np.where(flip[..., None], b, c)
    ha = tri[..., 0, axis]
    hb = np.where(flip, tri[..., 2, axis], tri[..., 1, axis])
    hc = np.where(flip, tri[..., 1, axis], tri[..., 2, axis])

    w_a, inc_a = _edge_fn(b2, c2, q2)
    w_b, inc_b = _edge_fn(c2, a, q2)
    w_c, inc_c = _edge_fn(a, b2, q2)
    inside = (
        ((w_a > 0) | ((w_a == 0) & inc_a))
        & ((w_b > 0) | ((w_b == 0) & inc_b))
        & ((w_c > 0) | ((w_c == 0) & inc_c))
        & keep
    )
    with np.errstate(invalid="ignore", divide="ignore"):
        h = (w_a * ha + w_b * hb + w_c * hc) / (w_a + w_b + w_c)
    return inside, h


def _bucket_pairs(tri: Array, axis: int, q2: Array) -> Tuple[Array, Array]:
    """Candidate (query, triangle) pairs from a uniform 2D bucket grid."""
    u, v = _axis_frame(axis)
    t2 = tri[:, :, [u, v]]
    tmin, tmax = t2.min(axis=1), t2.max(axis=1)
    lo = np.minimum(tmin.min(axis=0), q2.min(axis=0))
    hi = np.maximum(tmax.max(axis=0), q2.max(axis=0))
    g = int(max(1, min(256, math.ceil(2 * math.sqrt(len(tri))))))
    cell = np.maximum((hi - lo) / g, 1e-300)
    bucket = lambda x: np.clip(np.floor((x - lo) / cell).astype(np.int64), 0, g - 1)
    b0, b1 = bucket(tmin), bucket(tmax)
    # expand each triangle over the buckets its bounding box touches
    nu = b1[:, 0] - b0[:, 0] + 1
    nv = b1[:, 1] - b0[:, 1] + 1
    cnt = nu * nv
    t_idx = np.repeat(np.arange(len(tri)), cnt)
    k = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    bu = b0[t_idx, 0] + k // nv[t_idx]
    bv = b0[t_idx, 1] + k % nv[t_idx]
    tb = bu * g + bv
    order = np.argsort(tb, kind="stable")
    tb, t_idx = tb[order], t_idx[order]
    starts = np.searchsorted(tb, np.arange(g * g), side="left")
    ends = np.searchsorted(tb, np.arange(g * g), side="right")
    qb = bucket(q2)
    qb = qb[:, 0] * g + qb[:, 1]
    n = ends[qb] - starts[qb]
    q_idx = np.repeat(np.arange(len(q2)), n)
    off = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
    return q_idx, t_idx[starts[qb][q_idx] + off]


def _parity_along(mesh: Mesh, points: Array, axis: int) -> Array:
    """Odd number of crossings on the +axis ray from each point."""
    tri = mesh.vertices[mesh.triangles]
    u, v = _axis_frame(axis)
    counts = np.zeros(len(points), dtype=np.int64)
    step = 50_000
    for s in range(0, len(points), step):
        p = points[s : s + step]
        qi, ti = _bucket_pairs(tri, axis, p[:, [u, v]])
        hit, h = _ray_hits(tri[ti], axis, p[qi][:, [u, v]])
        above = hit & (h > p[qi, axis])
        counts[s : s + step] = np.bincount(qi[above], minlength=len(p))
    return counts % 2 == 1


def contains(mesh: Mesh, points: Array) -> Array:
    """Inside test: majority vote of ray parity along +x, +y and +z."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    votes = sum(_parity_along(mesh, points, ax).astype(np.int8) for ax in range(3))
    return votes >= 2


# ---------------------------------------------------------------------------
# Occupancy lattices
# ---------------------------------------------------------------------------

@dataclass
class OccupancyGrid:
    """Values sampled at lattice nodes origin + (i, j, k) * spacing."""

    values: Array
    origin: Array
    spacing: float
    watertight_warning: bool = False

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.spacing = float(self.spacing)
        r = self.values.shape[0]
        if self.values.shape[:3] != (r, r, r) or r < 2:
            raise GeometryError("occupancy grid must be R^3 with R >= 2")
        if self.spacing <= 0:
            raise GeometryError("spacing must be positive")

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    def node_positions(self) -> Array:
        r = self.resolution
        idx = np.stack(np.meshgrid(np.arange(r), np.arange(r), np.arange(r), indexing="ij"), axis=-1)
        return self.origin + idx * self.spacing

    def upper(self) -> Array:
        return self.origin + (self.resolution - 1) * self.spacing

    def same_lattice(self, other: "OccupancyGrid") -> bool:
        return (
            self.resolution == other.resolution
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-12)
            and math.isclose(self.spacing, other.spacing, rel_tol=1e-12)
        )


def voxelize(
    mesh: Mesh,
    resolution: int,
    bounds: Tuple[float, float] = (-0.5, 0.5),
) -> OccupancyGrid:
    """Cell-centered occupancy of the cube `bounds`^3.

    Each cell is 1 iff its center is inside the mesh by majority of the
    three axis-aligned parity tests.  If the three tests disagree on more
    than 5% of cells the grid is returned with `watertight_warning` set.
    """
    if resolution < 2:
        raise GeometryError("resolution must be >= 2")
    lo, hi = bounds
    spacing = (hi - lo) / resolution
    origin = np.full(3, lo + 0.5 * spacing)
    centers = lo + (np.arange(resolution) + 0.5) * spacing
    tri = mesh.vertices[mesh.triangles]

    parities = []
    for axis in range(3):
        u, v = _axis_frame(axis)
        gu, gv = np.meshgrid(centers, centers, indexing="ij")
        q2 = np.stack([gu.ravel(), gv.ravel()], axis=1)
        counts = np.zeros((len(q2), resolution + 1), dtype=np.int32)
        step = max(1, _CHUNK // max(1, len(tri)))
        for s in range(0, len(q2), step):
            hit, h = _ray_hits(tri[None], axis, q2[s : s + step, None, :])
            rows, cols = np.nonzero(hit)
            # a crossing at height h lies above every center strictly below it
            m = np.searchsorted(centers, h[rows, cols], side="left")
            np.add.at(counts, (rows + s, np.zeros_like(m)), 1)
            np.add.at(counts, (rows + s, m), -1)
        above = np.cumsum(counts, axis=1)[:, :resolution]
        par = (above % 2 == 1).reshape(resolution, resolution, resolution)
        # par is indexed (u, v, axis); move back to (x, y, z)
        order = [u, v, axis]
        par = np.transpose(par, np.argsort(order))
        parities.append(par)

    votes = sum(p.astype(np.int8) for p in parities)
    occ = (votes >= 2).astype(np.float64)
    disagree = float(np.mean((votes != 0) & (votes != 3)))
    return OccupancyGrid(occ, origin, spacing, watertight_warning=disagree > 0.05)


def trilinear(
    grid: Union[OccupancyGrid, Array],
    p: Array,
    origin: Optional[Array] = None,
    spacing: Optional[float] = None,
    return_clamped: bool = False,
):
    """Trilinear interpolation of node values at points p.

    `grid` is an OccupancyGrid or an array shaped (R, R, R, ...) with
    trailing value dimensions, in which case origin/spacing are required.
    Points outside the lattice are clamped to its boundary; pass
    `return_clamped=True` to also get a per-point flag.
    """
    if isinstance(grid, OccupancyGrid):
        values, origin, spacing = grid.values, grid.origin, grid.spacing
    else:
        values = np.asarray(grid, dtype=np.float64)
        if origin is None or spacing is None:
            raise GeometryError("origin and spacing required for raw arrays")
    origin = np.asarray(origin, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    shape = np.array(values.shape[:3])
    g = (p - origin) / spacing
    clamped = np.any((g < -1e-9) | (g > shape - 1 + 1e-9), axis=1)  # slack for rounding onto boundary nodes
    g = np.clip(g, 0, shape - 1)
    i0 = np.minimum(np.floor(g).astype(np.int64), shape - 2)
    t = g - i0
    out = 0.0
    for dx in (0, 1):
        wx = t[:, 0] if dx else 1 - t[:, 0]
        for dy in (0, 1):
            wy = t[:, 1] if dy else 1 - t[:, 1]
            for dz in (0, 1):
                wz = t[:, 2] if dz else 1 - t[:, 2]
                w = wx * wy * wz
                corner = values[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
                out = out + w.reshape((-1,) + (1,) * (corner.ndim - 1)) * corner
    if single:
        out, clamped = out[0], bool(clamped[0])
    return (out, clamped) if return_clamped else out


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------

def point_to_segment(p: Array, a: Array, b: Array) -> Union[float, Array]:
    """Distance from points p to segments ab.

    Scalar inputs give a float.  With p of shape (N, 3) and a, b of shape
    (M, 3) the result is the (N, M) distance matrix.
    """
    p = np.asarray(p, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if p.ndim == 1 and a.ndim == 1:
        d = b - a
        dd = float(d @ d)
        t = 0.0 if dd == 0 else min(1.0, max(0.0, float((p - a) @ d) / dd))
        return float(np.linalg.norm(p - (a + t * d)))
    p = np.atleast_2d(p)
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    d = b - a
    dd = np.einsum("ij,ij->i", d, d)
    ap = p[:, None, :] - a[None, :, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.einsum("nmk,mk->nm", ap, d) / dd[None, :]
    t = np.where(dd[None, :] > 0, np.clip(t, 0.0, 1.0), 0.0)
    closest = a[None] + t[..., None] * d[None]
    return np.linalg.norm(p[:, None, :] - closest, axis=2)


def chamfer_l1(a: Array, b: Array) -> float:
    """Symmetric Chamfer-L1: mean of the two directed mean nearest distances."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise GeometryError("chamfer distance of an empty point set")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def volumetric_iou(g1: OccupancyGrid, g2: OccupancyGrid) -> float:
    if not g1.same_lattice(g2):
        raise GeometryError("occupancy grids are on different lattices")
    a = g1.values >= 0.5
    b = g2.values >= 0.5
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

@dataclass
class SampleBatch:
    points: Array
    inside_mask: Array

    def __len__(self) -> int:
        return len(self.points)


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator) -> Tuple[Array, Array]:
    """Area-weighted surface samples and their face normals."""
    areas = mesh.triangle_areas()
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    v = mesh.vertices[mesh.triangles[face]]
    pts = (1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1] + (r1 * r2)[:, None] * v[:, 2]
    return pts, mesh.face_normals()[face]


def sample_interior(mesh: Mesh, n: int, rng: np.random.Generator, max_tries: int = 1000) -> Array:
    """Uniform rejection samples inside the mesh volume."""
    lo, hi = mesh.bounds()
    accepted: list = []
    have = 0
    drawn = 0
    cap = max(10_000, max_tries * n)
    batch = max(256, 4 * n)
    while have < n:
        if drawn >= cap:
            raise GeometryError("degenerate interior")
        cand = lo + (hi - lo) * rng.random((batch, 3))
        drawn += batch
        keep = cand[contains(mesh, cand)]
        accepted.append(keep)
        have += len(keep)
        if drawn >= 10_000 and have / drawn < 1e-3:
            raise GeometryError("degenerate interior")
    return np.concatenate(accepted)[:n]


def sample_points(mesh: Mesh, n_points: int, band: float = 0.05, seed: int = 0) -> SampleBatch:
    """floor(0.9 n_points) interior points plus near-surface points just outside.

    Outside points are surface samples pushed along the face normal by a
    distance drawn from (0, band]; the direction is flipped when the first
    choice lands inside, and samples that are inside either way (internal
    faces of touching parts) are redrawn.
    """
    if n_points < 10:
        raise GeometryError("n_points must be >= 10")
    if band <= 0:
        raise GeometryError("band must be positive")
    rng = np.random.default_rng(seed)
    n_in = int(math.floor(0.9 * n_points))
    n_out = n_points - n_in
    inside = sample_interior(mesh, n_in, rng)

    outside: list = []
    have = 0
    rounds = 0
    while have < n_out:
        rounds += 1
        if rounds > 100:
            raise GeometryError("could not place near-surface samples")
        m = 2 * (n_out - have) + 16
        s, nrm = sample_surface(mesh, m, rng)
        t = band * (1.0 - rng.random(m))  # (0, band]
        q = s + t[:, None] * nrm
        bad = contains(mesh, q)
        q[bad] = s[bad] - t[bad, None] * nrm[bad]
        ok = ~contains(mesh, q)
        outside.append(q[ok])
        have += int(ok.sum())
    out = np.concatenate(outside)[:n_out]
    pts = np.concatenate([inside, out])
    mask = np.concatenate([np.ones(n_in, bool), np.zeros(n_out, bool)])
    return SampleBatch(pts, mask)


# ---------------------------------------------------------------------------
# Symmetry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SymmetryPlane:
    axis: str
    offset: float = 0.0
    chamfer: float = 0.0

    @property
    def axis_index(self) -> int:
        return AXES.index(self.axis)

    def reflect(self, points: Array) -> Array:
        out = np.array(points, dtype=np.float64, copy=True)
        k = self.axis_index
        out[..., k] = 2 * self.offset - out[..., k]
        return out


def reflect(points: Array, axis: int) -> Array:
    out = np.array(points, dtype=np.float64, copy=True)
    out[..., axis] = -out[..., axis]
    return out


def symmetry_residuals(mesh: Mesh) -> Array:
    v = mesh.vertices
    return np.array([chamfer_l1(reflect(v, k), v) for k in range(3)])


def detect_symmetry(mesh: Mesh, threshold: float = 0.02) -> Optional[SymmetryPlane]:
    """Best canonical mirror plane, or None if no residual is below threshold.

    Ties go to the earlier axis (x, then y, then z).
    """
    res = symmetry_residuals(mesh)
    best = 0
    for k in (1, 2):
        if res[k] < res[best]:
            best = k
    if res[best] >= threshold:
        return None
    return SymmetryPlane(AXES[best], 0.0, float(res[best]))
