"""From probability fields to a discrete skeleton.

Joints come from a mean-shift whose kernel lives in the instance-embedding
space and is modulated by the joint probability of each neighbor; the
kinematic tree is the minimum spanning tree of the complete joint graph
weighted by -log of the mean bone probability along each edge.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .fields import Skeleton
from .geometry import point_to_segment

FieldFn = Callable[[np.ndarray], np.ndarray]


class ExtractionError(ValueError):
    pass


@dataclass(frozen=True)
class MeanShiftConfig:
    bandwidth: float = 0.5  # RBF scale in embedding space
    max_iters: int = 100
    tol: float = 1e-6
    merge_radius: float = 0.08  # model space, 2 sigma
    neighbor_radius: float = 0.1  # model space; inf means every seed
    seed_threshold: float = 0.5
    n_seeds: int = 4096
    min_group_size: int = 3

    def __post_init__(self) -> None:
        if min(self.bandwidth, self.tol, self.merge_radius, self.neighbor_radius) <= 0 or self.max_iters <= 0:
            raise ValueError("mean-shift parameters must be positive")


@dataclass
class CandidateSet:
    positions: np.ndarray  # (S, 3)
    joint_prob: np.ndarray  # (S,)
    embeddings: np.ndarray  # (S, E)

    def __len__(self) -> int:
        return len(self.positions)


def _kernel_weights(emb: np.ndarray, cand: CandidateSet, bandwidth: float) -> np.ndarray:
    d2 = cdist(np.atleast_2d(emb), cand.embeddings, "sqeuclidean")
    return cand.joint_prob[None, :] * np.exp(-d2 / (2.0 * bandwidth ** 2))


def mean_shift_step(position, embedding, neighbors: CandidateSet,
                    cfg: MeanShiftConfig = MeanShiftConfig()) -> Tuple[np.ndarray, bool]:
    """Displacement of one point toward the modulated kernel mean.

    Returns (displacement, degenerate); degenerate is True, with zero displacement,
    when the total neighbor weight is below 1e-12.
    """
    position = np.asarray(position, dtype=np.float64)
    if len(neighbors) == 0:
        raise ExtractionError("empty neighborhood")
    w = _kernel_weights(np.asarray(embedding, dtype=np.float64), neighbors, cfg.bandwidth)[0]
    total = w.sum()
    if total < 1e-12:
        return np.zeros(3), True
    return (w @ neighbors.positions) / total - position, False


def _dedupe(cand: CandidateSet) -> CandidateSet:
    rows = np.concatenate([cand.positions, cand.joint_prob[:, None], cand.embeddings], axis=1)
    rows = np.unique(rows, axis=0)  # also sorts, so seed order does not matter
    return CandidateSet(rows[:, :3], rows[:, 3], rows[:, 4:])


def shift_seeds(cand: CandidateSet, cfg: MeanShiftConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Run mean-shift on every seed; neighbors are drawn from the seed set.

    Each moving seed carries a position and an embedding; both are moved by
    the same kernel weights, so the embedding climbs to a mode and the
    position follows the probability-weighted mean of that mode's members.
    Returns converged (positions, embeddings).
    """
    pos = cand.positions.copy()
    emb = cand.embeddings.copy()
    active = np.ones(len(pos), dtype=bool)
    radius = cfg.neighbor_radius
    for _ in range(cfg.max_iters):
        if not active.any():
            break
        a = np.nonzero(active)[0]
        w = _kernel_weights(emb[a], cand, cfg.bandwidth)
        if np.isfinite(radius):
            w = w * (cdist(pos[a], cand.positions) <= radius)
        total = w.sum(axis=1)
        ok = total >= 1e-12
        new_pos = pos[a].copy()
        new_emb = emb[a].copy()
        new_pos[ok] = (w[ok] @ cand.positions) / total[ok, None]
        new_emb[ok] = (w[ok] @ cand.embeddings) / total[ok, None]
        shift = np.linalg.norm(new_pos - pos[a], axis=1)
        pos[a] = new_pos
        emb[a] = new_emb
        active[a[(shift < cfg.tol) | ~ok]] = False
    return pos, emb


def merge_groups(points: np.ndarray, radius: float) -> np.ndarray:
    """Single-linkage group labels for points closer than radius."""
    n = len(points)
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    return connected_components(graph, directed=False)[1]


def extract_joints(points: np.ndarray, joint_prob: np.ndarray, embeddings: np.ndarray,
                   cfg: MeanShiftConfig = MeanShiftConfig()) -> np.ndarray:
    """Joint positions from a dense sample of field values.

    Seeds are the points with joint probability above cfg.seed_threshold.
    After shifting, converged seeds within cfg.merge_radius are merged and
    each group yields the probability-weighted mean of its members.  Groups
    smaller than cfg.min_group_size are dropped unless nothing else remains.
    """
    points = np.asarray(points, dtype=np.float64)
    joint_prob = np.asarray(joint_prob, dtype=np.float64)
    embeddings = np.asarray(embeddings, dtype=np.float64).reshape(len(points), -1)
    keep = joint_prob > cfg.seed_threshold
    if not keep.any():
        raise ExtractionError("no joint evidence")
    cand = _dedupe(CandidateSet(points[keep], joint_prob[keep], embeddings[keep]))
    conv, _ = shift_seeds(cand, cfg)
    labels = merge_groups(conv, cfg.merge_radius)
    n = labels.max() + 1
    sizes = np.bincount(labels, minlength=n)
    wsum = np.bincount(labels, weights=cand.joint_prob, minlength=n)
    joints = np.stack([np.bincount(labels, weights=cand.joint_prob * conv[:, k], minlength=n) for k in range(3)],
                      axis=1) / wsum[:, None]
    big = sizes >= cfg.min_group_size
    if not big.any():
        big = sizes == sizes.max()
    # groups are numbered by first member in sorted seed order: deterministic
    return joints[big]


def select_root(joints: np.ndarray, root_prob) -> int:
    """Index of the joint with the largest root probability (lowest on ties).

    `root_prob` is either per-joint values or a callable field.
    """
    joints = np.atleast_2d(joints)
    if len(joints) == 0:
        raise ExtractionError("no joints")
    vals = root_prob(joints) if callable(root_prob) else np.asarray(root_prob, dtype=np.float64)
    return int(np.argmax(vals))


def edge_weight(a, b, bone_prob: FieldFn, M: int = 16, eps: float = 1e-4) -> float:
    """-log(eps + mean bone probability at M evenly spaced points on ab)."""
    if M < 2:
        raise ValueError("need M >= 2 samples per edge")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    t = np.linspace(0.0, 1.0, M)[:, None]
    vals = bone_prob(a + t * (b - a))
    return float(-np.log(eps + np.mean(vals)))


@dataclass
class WeightedGraph:
    nodes: np.ndarray  # (n, 3) joint positions
    weights: np.ndarray  # (n, n) symmetric

    def __post_init__(self) -> None:
        self.nodes = np.atleast_2d(np.asarray(self.nodes, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.nodes), len(self.nodes)):
            raise ValueError("weights must be n x n")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("edge weights must be finite")


def build_graph(joints: np.ndarray, bone_prob: FieldFn, M: int = 16, eps: float = 1e-4,
                occlusion_radius: Optional[float] = 0.08) -> WeightedGraph:
    """Complete joint graph weighted by edge_weight.

    An edge whose interior passes within `occlusion_radius` of a third joint
    duplicates the two-bone path through that joint (collinear joints make
    the two weights tie), so it is penalized by -log(eps) to keep it last.
    """
    joints = np.atleast_2d(joints)
    n = len(joints)
    w = np.zeros((n, n))
    iu, ju = np.triu_indices(n, 1)
    if len(iu):
        t = np.linspace(0.0, 1.0, M)
        seg = joints[iu, None, :] + t[None, :, None] * (joints[ju] - joints[iu])[:, None, :]
        vals = np.asarray(bone_prob(seg.reshape(-1, 3))).reshape(len(iu), M)
        w[iu, ju] = -np.log(eps + vals.mean(axis=1))
        if occlusion_radius is not None and n > 2:
            d = point_to_segment(joints, joints[iu], joints[ju])  # (n, pairs)
            d[iu, np.arange(len(iu))] = np.inf
            d[ju, np.arange(len(iu))] = np.inf
            blocked = d.min(axis=0) < occlusion_radius
            w[iu[blocked], ju[blocked]] += -np.log(eps)
        w[ju, iu] = w[iu, ju]
    return WeightedGraph(joints, w)


def prim_edges(weights: np.ndarray, root: int) -> list:
    """Prim's algorithm from root; returns (parent, child) edges in insertion order.

    Among frontier edges the smallest (weight, min endpoint, max endpoint) wins.
    """
    n = len(weights)
    in_tree = np.zeros(n, dtype=bool)
    in_tree[root] = True
    best_w = weights[root].astype(np.float64).copy()
    best_from = np.full(n, root)
    edges = []
    for _ in range(n - 1):
        cand = np.nonzero(~in_tree)[0]
        keys = [(best_w[v], min(v, best_from[v]), max(v, best_from[v]), v) for v in cand]
        _, _, _, v = min(keys)
        edges.append((int(best_from[v]), int(v)))
        in_tree[v] = True
        for u in np.nonzero(~in_tree)[0]:
            w = weights[v, u]
            cur = (best_w[u], min(u, best_from[u]), max(u, best_from[u]))
            if (w, min(u, v), max(u, v)) < cur:
                best_w[u] = w
                best_from[u] = v
    return edges


def kinematic_tree(graph: WeightedGraph, root: int) -> Skeleton:
    n = len(graph.nodes)
    if n == 0:
        raise ExtractionError("empty graph")
    parents = np.full(n, -1)
    for p, c in prim_edges(graph.weights, root):
        parents[c] = p
    return Skeleton(graph.nodes.copy(), parents, root)


def tree_weight(skel: Skeleton, weights: np.ndarray) -> float:
    b = skel.bones
    return float(weights[b[:, 0], b[:, 1]].sum()) if len(b) else 0.0


def canonical_form(skel: Skeleton) -> str:
    """Rooted-tree canonical string; equal strings mean isomorphic trees."""
    def enc(j: int) -> str:
        return "(" + "".join(sorted(enc(c) for c in skel.children(j))) + ")"

    return enc(skel.root)


def skeleton_from_fields(points: np.ndarray, joint_prob: np.ndarray, embeddings: np.ndarray,
                         root_prob: FieldFn, bone_prob: FieldFn, cfg: MeanShiftConfig = MeanShiftConfig(),
                         M: int = 16, eps: float = 1e-4, occlusion_radius: Optional[float] = 0.08) -> Skeleton:
    """Joints, root and kinematic tree from field samples and field callables."""
    joints = extract_joints(points, joint_prob, embeddings, cfg)
    root = select_root(joints, root_prob)
    return kinematic_tree(build_graph(joints, bone_prob, M, eps, occlusion_radius), root)
