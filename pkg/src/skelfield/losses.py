"""Training objectives as differentiable torch functions.

Inputs are tensors; each function returns a scalar tensor (or a tuple of
them) so that autograd can be used directly.  Hinges use relu, whose
subgradient at the kink is 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import torch
from torch import Tensor


@dataclass(frozen=True)
class DiscriminativeParams:
    delta_var: float = 0.1
    delta_dist: float = 0.5
    w_var: float = 1.0
    w_dist: float = 1.0
    w_reg: float = 0.001

    def __post_init__(self) -> None:
        if not 0 < self.delta_var < self.delta_dist:
            raise ValueError("need 0 < delta_var < delta_dist")


def _ratio_or_half(num: Tensor, den: Tensor) -> Tensor:
    # 0/0 is taken at its perfect-agreement limit of 1/2
    safe = torch.where(den == 0, torch.ones_like(den), den)
    return torch.where(den == 0, torch.full_like(num, 0.5), num / safe)


def dice_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Two-sided Dice loss over foreground and background occupancy."""
    pred = pred.reshape(-1)
    target = target.reshape(-1).to(pred.dtype)
    if pred.shape != target.shape:
        raise ValueError("pred and target must have equal length")
    fg = _ratio_or_half((pred * target).sum(), (pred + target).sum())
    bg = _ratio_or_half(((1 - pred) * (1 - target)).sum(), (2 - pred - target).sum())
    return 1 - fg - bg


def l1_field_loss(pred: Tensor, target: Tensor, reduction: str = "sum") -> Tensor:
    if pred.shape != target.shape:
        raise ValueError("pred and target must have equal shape")
    err = (pred - target.to(pred.dtype)).abs()
    if reduction == "sum":
        return err.sum()
    if reduction == "mean":
        return err.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def symmetry_loss(pred: Tensor, pred_mirrored: Tensor, symmetric: bool) -> Tensor:
    """Sum of absolute differences between predictions at points and at their mirror images.

    Zero for shapes without a symmetry plane.
    """
    if pred.shape != pred_mirrored.shape:
        raise ValueError("pred and pred_mirrored must have equal shape")
    if not symmetric:
        return pred.new_zeros(())
    return (pred - pred_mirrored).abs().sum()


def discriminative_loss(
    embeddings: Tensor,
    labels: Tensor,
    params: DiscriminativeParams = DiscriminativeParams(),
) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """Pull/push/regularize loss on per-point embeddings.

    Returns (total, l_var, l_dist, l_reg).  Labels are compacted to the
    clusters actually present.
    """
    if embeddings.ndim != 2 or labels.shape[0] != embeddings.shape[0]:
        raise ValueError("embeddings must be (N, E) with one label per row")
    if embeddings.shape[0] == 0:
        raise ValueError("degenerate labeling")
    _, inv = torch.unique(labels, return_inverse=True)
    n_clusters = int(inv.max()) + 1
    counts = torch.bincount(inv, minlength=n_clusters).to(embeddings.dtype)
    if torch.any(counts == 0):
        raise ValueError("degenerate labeling")
    sums = embeddings.new_zeros((n_clusters, embeddings.shape[1])).index_add(0, inv, embeddings)
    mu = sums / counts[:, None]

    dist_to_mean = torch.linalg.vector_norm(mu[inv] - embeddings, dim=1)
    pull = torch.relu(dist_to_mean - params.delta_var) ** 2
    per_cluster = embeddings.new_zeros(n_clusters).index_add(0, inv, pull) / counts
    l_var = per_cluster.mean()

    if n_clusters > 1:
        diff = mu[:, None, :] - mu[None, :, :]
        off = ~torch.eye(n_clusters, dtype=torch.bool, device=mu.device)
        pair = torch.linalg.vector_norm(diff[off], dim=1)
        l_dist = (torch.relu(2 * params.delta_dist - pair) ** 2).mean()
    else:
        l_dist = embeddings.new_zeros(())

    l_reg = torch.linalg.vector_norm(mu, dim=1).mean()
    total = params.w_var * l_var + params.w_dist * l_dist + params.w_reg * l_reg
    return total, l_var, l_dist, l_reg
