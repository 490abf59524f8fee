"""Multi-head implicit decoder over a gated convolutional feature volume.

The occupancy grid is turned into a C-channel feature volume by a shallow
gated conv stem (two conv blocks around one down/up pair, each block
followed by a channel gate).  Point queries trilinearly interpolate that
volume, append the point coordinates and run a residual MLP trunk feeding
four heads: joint, root and bone probabilities plus an instance embedding.
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .fields import FieldTargets, Skeleton, build_targets
from .geometry import Mesh, OccupancyGrid, SymmetryPlane, detect_symmetry, sample_points, voxelize
from .losses import DiscriminativeParams, discriminative_loss, l1_field_loss, symmetry_loss

logger = logging.getLogger(__name__)

LOSS_TERMS = ("joint", "root", "bone", "sym", "inst")
# lattice-coordinate slack so points computed onto a boundary node are not flagged
_NODE_TOL = 1e-9


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass
class FeatureGrid:
    values: Tensor  # (C, R, R, R)
    origin: np.ndarray
    spacing: float

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def resolution(self) -> int:
        return self.values.shape[1]


def trilinear_sample(values: Tensor, origin, spacing: float, points: Tensor) -> Tuple[Tensor, Tensor]:
    """Interpolate (C, R, R, R) node values at (N, 3) points.

    Returns ((N, C) features, (N,) bool clamped flags).  Out-of-lattice
    points are clamped to the boundary.
    """
    c, r = values.shape[0], values.shape[1]
    origin_t = torch.as_tensor(np.asarray(origin), dtype=points.dtype)
    g = (points - origin_t) / spacing
    clamped = ((g < -_NODE_TOL) | (g > r - 1 + _NODE_TOL)).any(dim=1)
    g = g.clamp(0, r - 1)
    i0 = torch.floor(g).long().clamp(max=r - 2)
    t = (g - i0.to(g.dtype)).to(values.dtype)
    flat = values.reshape(c, -1)
    out = values.new_zeros((points.shape[0], c))
    for dx in (0, 1):
        wx = t[:, 0] if dx else 1 - t[:, 0]
        for dy in (0, 1):
            wy = t[:, 1] if dy else 1 - t[:, 1]
            for dz in (0, 1):
                wz = t[:, 2] if dz else 1 - t[:, 2]
                idx = ((i0[:, 0] + dx) * r + (i0[:, 1] + dy)) * r + (i0[:, 2] + dz)
                out = out + (wx * wy * wz)[:, None] * flat[:, idx].T
    return out, clamped


class ChannelGate(nn.Module):
    """Channel gating for 3D feature volumes.

    Pooled channel means pass through a bottleneck (squeeze, ReLU, excite,
    sigmoid) and the result rescales each channel.
    """

    def __init__(self, channels: int, reduction: int = 2):
        super().__init__()
        if channels % reduction:
            raise ValueError("reduction must divide channels")
        self.squeeze = nn.Linear(channels, channels // reduction, bias=False)
        self.excite = nn.Linear(channels // reduction, channels, bias=False)

    def gate(self, x: Tensor) -> Tensor:
        s = x.mean(dim=(2, 3, 4))
        return torch.sigmoid(self.excite(F.relu(self.squeeze(s))))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)[:, :, None, None, None]


class FeatureEncoder(nn.Module):
    def __init__(self, channels: int = 8, reduction: int = 2):
        super().__init__()
        if channels < 4:
            raise ValueError("need at least 4 feature channels")
        self.conv_in = nn.Conv3d(1, channels, 3, padding=1)
        self.gate_in = ChannelGate(channels, reduction)
        self.down = nn.Conv3d(channels, channels, 3, stride=2, padding=1)
        self.gate_down = ChannelGate(channels, reduction)
        self.up = nn.Conv3d(channels, channels, 3, padding=1)
        self.gate_up = ChannelGate(channels, reduction)
        self.conv_out = nn.Conv3d(channels, channels, 3, padding=1)
        self.gate_out = ChannelGate(channels, reduction)

    def forward(self, occ: Tensor) -> Tensor:
        """occ: (B, 1, R, R, R) with R even -> (B, C, R, R, R)."""
        if occ.shape[-1] % 2:
            raise ValueError("grid resolution must be even")
        h = self.gate_in(F.relu(self.conv_in(occ)))
        d = self.gate_down(F.relu(self.down(h)))
        u = F.interpolate(d, scale_factor=2, mode="trilinear", align_corners=False)
        u = self.gate_up(F.relu(self.up(u)))
        return self.gate_out(self.conv_out(h + u))


class ResnetBlockFC(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fc0 = nn.Linear(width, width)
        self.fc1 = nn.Linear(width, width)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.fc1(F.relu(self.fc0(F.relu(x))))


class MultiHeadDecoder(nn.Module):
    def __init__(self, feat_dim: int, hidden: int = 64, n_blocks: int = 5, embed_dim: int = 8):
        super().__init__()
        if embed_dim < 2:
            raise ValueError("embedding dimension must be >= 2")
        self.fc_in = nn.Linear(feat_dim + 3, hidden)
        self.blocks = nn.ModuleList(ResnetBlockFC(hidden) for _ in range(n_blocks))
        self.joint = nn.Linear(hidden, 1)
        self.root = nn.Linear(hidden, 1)
        self.bone = nn.Linear(hidden, 1)
        self.embed = nn.Linear(hidden, embed_dim)

    def forward(self, feat: Tensor, points: Tensor) -> Dict[str, Tensor]:
        h = self.fc_in(torch.cat([feat, points.to(feat.dtype)], dim=1))
        for blk in self.blocks:
            h = blk(h)
        h = F.relu(h)
        return {
            "joint": torch.sigmoid(self.joint(h)).squeeze(1),
            "root": torch.sigmoid(self.root(h)).squeeze(1),
            "bone": torch.sigmoid(self.bone(h)).squeeze(1),
            "embed": self.embed(h),
        }


class SkeletonFieldNet(nn.Module):
    def __init__(self, channels: int = 8, reduction: int = 2, hidden: int = 64,
                 n_blocks: int = 5, embed_dim: int = 8):
        super().__init__()
        self.encoder = FeatureEncoder(channels, reduction)
        self.decoder = MultiHeadDecoder(channels, hidden, n_blocks, embed_dim)

    def encode(self, grid: OccupancyGrid) -> FeatureGrid:
        dtype = next(self.parameters()).dtype
        occ = torch.as_tensor(grid.values, dtype=dtype)[None, None]
        return FeatureGrid(self.encoder(occ)[0], grid.origin.copy(), grid.spacing)

    def query(self, features: FeatureGrid, points) -> Dict[str, Tensor]:
        pts = torch.as_tensor(np.asarray(points), dtype=features.values.dtype)
        feat, clamped = trilinear_sample(features.values, features.origin, features.spacing, pts)
        out = self.decoder(feat, pts)
        out["clamped"] = clamped
        return out


def encode(grid: OccupancyGrid, model: SkeletonFieldNet) -> FeatureGrid:
    return model.encode(grid)


def query(model: SkeletonFieldNet, features: FeatureGrid, p) -> Dict[str, Tensor]:
    return model.query(features, np.atleast_2d(p))


@torch.no_grad()
def predict_fields(model: SkeletonFieldNet, grid: OccupancyGrid, points: np.ndarray,
                   chunk: int = 8192) -> Dict[str, np.ndarray]:
    """Evaluate all heads at points; returns float64 numpy arrays."""
    feats = model.encode(grid)
    parts: Dict[str, list] = {"joint": [], "root": [], "bone": [], "embed": []}
    for s in range(0, len(points), chunk):
        out = model.query(feats, points[s : s + chunk])
        for k in parts:
            parts[k].append(out[k].double().numpy())
    return {k: np.concatenate(v) for k, v in parts.items()}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 3e-3
    steps: int = 2000
    batch_size: int = 1024
    optimizer: str = "adam"  # or "sgd" (momentum-free)
    schedule: str = "cosine"  # or "constant"
    warmup: int = 200
    w_joint: float = 1.0
    w_root: float = 1.0
    w_bone: float = 1.0
    w_sym: float = 0.5
    w_inst: float = 1.0
    seed: int = 0
    channels: int = 8
    reduction: int = 2
    hidden: int = 64
    n_blocks: int = 5
    embed_dim: int = 8
    grid_resolution: int = 16
    grid_bounds: Tuple[float, float] = (-0.6, 0.6)
    sigma: float = 0.04
    band: float = 0.05
    pool_size: int = 16384
    focus_fraction: float = 0.75
    focus_threshold: float = 0.3
    symmetry_threshold: float = 0.02
    num_threads: int = 1

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.steps < 0 or self.warmup < 0 or self.batch_size <= 0 or self.pool_size < self.batch_size:
            raise ValueError("invalid training configuration")
        if not 0 <= self.focus_fraction < 1:
            raise ValueError("focus_fraction must be in [0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class ShapeData:
    grid: OccupancyGrid
    points: np.ndarray
    targets: FieldTargets
    plane: Optional[SymmetryPlane]

    def focus_groups(self, threshold: float) -> List[np.ndarray]:
        """Pool indices near each joint, then the bone band."""
        t = self.targets
        near = t.joint_prob > threshold
        groups = [np.nonzero(near & (t.instance == j))[0] for j in np.unique(t.instance)]
        groups.append(np.nonzero(t.bone_prob > threshold)[0])
        return [g for g in groups if len(g)]


def draw_batch(shape: ShapeData, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Pool indices for one step.

    A `focus_fraction` share of the batch is split evenly between the
    neighborhoods of every joint and the bone band (targets above
    `focus_threshold`); the rest is uniform.  Without it the sparse fields
    collapse to the all-zero L1 median, and small joint neighborhoods die
    once their sigmoid saturates.
    """
    groups = shape.focus_groups(cfg.focus_threshold)
    n_focus = int(round(cfg.focus_fraction * cfg.batch_size)) if groups else 0
    parts = [rng.choice(len(shape.points), cfg.batch_size - n_focus, replace=False)]
    for k, g in enumerate(groups):
        n = n_focus // len(groups) + (k < n_focus % len(groups))
        parts.append(rng.choice(g, n, replace=True))
    return np.concatenate(parts)


def prepare_shape(mesh: Mesh, skeleton: Skeleton, cfg: TrainConfig, seed: int) -> ShapeData:
    grid = voxelize(mesh, cfg.grid_resolution, cfg.grid_bounds)
    batch = sample_points(mesh, cfg.pool_size, cfg.band, seed)
    targets = build_targets(skeleton, batch, cfg.sigma)
    return ShapeData(grid, batch.points, targets, detect_symmetry(mesh, cfg.symmetry_threshold))


def build_model(cfg: TrainConfig) -> SkeletonFieldNet:
    torch.manual_seed(cfg.seed)
    return SkeletonFieldNet(cfg.channels, cfg.reduction, cfg.hidden, cfg.n_blocks, cfg.embed_dim)


def shape_loss(model: SkeletonFieldNet, shape: ShapeData, idx: np.ndarray, cfg: TrainConfig,
               inst_params: DiscriminativeParams = DiscriminativeParams()) -> Tuple[Tensor, Dict[str, Tensor]]:
    """Weighted training objective of one shape on the pool subset `idx`."""
    dtype = next(model.parameters()).dtype
    feats = model.encode(shape.grid)
    pts = shape.points[idx]
    tg = shape.targets.subset(idx)
    out = model.query(feats, pts)
    t = lambda a: torch.as_tensor(a, dtype=dtype)
    terms = {
        "joint": l1_field_loss(out["joint"], t(tg.joint_prob)),
        "root": l1_field_loss(out["root"], t(tg.root_prob)),
        "bone": l1_field_loss(out["bone"], t(tg.bone_prob)),
    }
    if shape.plane is not None:
        mir = model.query(feats, shape.plane.reflect(pts))
        terms["sym"] = (symmetry_loss(out["joint"], mir["joint"], True)
                        + symmetry_loss(out["bone"], mir["bone"], True))
    else:
        terms["sym"] = out["joint"].new_zeros(())
    terms["inst"] = discriminative_loss(out["embed"], torch.as_tensor(tg.instance), inst_params)[0]
    total = (cfg.w_joint * terms["joint"] + cfg.w_root * terms["root"] + cfg.w_bone * terms["bone"]
             + cfg.w_sym * terms["sym"] + cfg.w_inst * terms["inst"])
    return total, terms


@contextlib.contextmanager
def _threads(n: int):
    old = torch.get_num_threads()
    torch.set_num_threads(n)
    try:
        yield
    finally:
        torch.set_num_threads(old)


@dataclass
class TrainResult:
    model: SkeletonFieldNet
    trace: List[Dict[str, float]] = field(default_factory=list)
    shapes: List[ShapeData] = field(default_factory=list)


def lr_factor(step: int, steps: int, schedule: str = "constant", warmup: int = 0) -> float:
    """Multiplier on the base rate: linear warmup, then constant or cosine decay."""
    if step < warmup:
        return (step + 1) / warmup
    if schedule == "constant":
        return 1.0
    span = max(steps - warmup, 1)
    return 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


def minimize(loss_fn, params: Sequence[Tensor], steps: int, lr: float, optimizer: str = "adam",
             on_step=None, schedule: str = "constant", warmup: int = 0) -> List[float]:
    """Generic descent loop; loss_fn(step) returns (total, extras)."""
    opt = torch.optim.Adam(params, lr=lr) if optimizer == "adam" else torch.optim.SGD(params, lr=lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: lr_factor(k, steps, schedule, warmup))
    trace = []
    for step in range(steps):
        opt.zero_grad()
        total, extras = loss_fn(step)
        if not torch.isfinite(total):
            terms = ", ".join(f"{k}={float(torch.as_tensor(v).detach()):.4g}" for k, v in extras.items())
            raise NumericalError(f"non-finite loss {total.item()} at step {step}: {terms}")
        total.backward()
        opt.step()
        sched.step()
        trace.append(float(total.detach()))
        if on_step is not None:
            on_step(step, total, extras)
    return trace


def train(meshes: Sequence[Mesh], skeletons: Sequence[Skeleton], cfg: TrainConfig,
          model: Optional[SkeletonFieldNet] = None, shapes: Optional[List[ShapeData]] = None) -> TrainResult:
    if len(meshes) == 0 or len(meshes) != len(skeletons):
        raise ValueError("need at least one mesh with an annotated skeleton")
    with _threads(cfg.num_threads):
        if shapes is None:
            shapes = [prepare_shape(m, s, cfg, cfg.seed + 1000 * i)
                      for i, (m, s) in enumerate(zip(meshes, skeletons))]
        if model is None:
            model = build_model(cfg)
        rng = np.random.default_rng(cfg.seed)
        trace: List[Dict[str, float]] = []

        def step_loss(step):
            total = 0.0
            sums = {k: 0.0 for k in LOSS_TERMS}
            for sh in shapes:
                idx = draw_batch(sh, cfg, rng)
                loss, terms = shape_loss(model, sh, idx, cfg)
                total = total + loss
                for k in LOSS_TERMS:
                    sums[k] = sums[k] + terms[k]
            return total, sums

        def record(step, total, extras):
            row = {"step": step, "total": float(total.detach())}
            row.update({k: float(torch.as_tensor(v).detach()) for k, v in extras.items()})
            trace.append(row)
            if step % 200 == 0:
                logger.info("step %d loss %.4f", step, row["total"])

        minimize(step_loss, list(model.parameters()), cfg.steps, cfg.lr, cfg.optimizer, record, cfg.schedule, cfg.warmup)
    return TrainResult(model, trace, shapes)


@torch.no_grad()
def joint_field_l1(model: SkeletonFieldNet, shape: ShapeData, points: np.ndarray,
                   targets: FieldTargets) -> float:
    """Per-point mean L1 error of the joint head."""
    pred = predict_fields(model, shape.grid, points)["joint"]
    return float(np.mean(np.abs(pred - targets.joint_prob)))


def model_tensors(model: nn.Module) -> Dict[str, np.ndarray]:
    return {k: v.detach().double().numpy().copy() for k, v in model.state_dict().items()}


def load_tensors(model: nn.Module, tensors: Dict[str, np.ndarray]) -> nn.Module:
    dtype = next(model.parameters()).dtype
    model.load_state_dict({k: torch.as_tensor(v, dtype=dtype) for k, v in tensors.items()})
    return model
