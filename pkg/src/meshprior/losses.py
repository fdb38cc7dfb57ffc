"""Training losses for geometry optimization.

All functions accept torch tensors (gradients flow) or numpy arrays and
return a scalar torch tensor. Nearest-neighbor ties resolve to the lowest
index (torch.min semantics) so gradients are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .geometry import EdgeTopology

__all__ = ["LossWeights", "chamfer_loss", "edge_length_loss", "total_geometry_loss"]


@dataclass(frozen=True)
class LossWeights:
    """Weights of the geometry objective: chamfer term and edge regularizer."""

    lambda0: float = 1.0
    lambda1: float = 0.2

    def __post_init__(self):
        if self.lambda0 < 0 or self.lambda1 < 0:
            raise ValueError("loss weights must be nonnegative")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def chamfer_loss(samples_phat, cloud_q) -> torch.Tensor:
    """Symmetric sum of squared nearest-neighbor distances between two point sets.

    sum_p min_q ||p - q||^2 + sum_q min_p ||p - q||^2; differentiable in both
    arguments.
    """
    p = _as_tensor(samples_phat)
    q = _as_tensor(cloud_q)
    if p.ndim != 2 or q.ndim != 2 or p.shape[1] != 3 or q.shape[1] != 3:
        raise ValueError("expected (K,3) and (N,3) point arrays")
    d2 = torch.cdist(p, q) ** 2
    return d2.min(dim=1).values.sum() + d2.min(dim=0).values.sum()


def edge_length_loss(vertices, topology: EdgeTopology) -> torch.Tensor:
    """Sum over vertices of squared distances to their one-ring neighbors.

    Equals twice the sum of squared edge lengths (each edge seen from both
    endpoints); differentiable with respect to vertices.
    """
    v = _as_tensor(vertices)
    edges = torch.as_tensor(topology.edges)
    diff = v[edges[:, 0]] - v[edges[:, 1]]
    return 2.0 * (diff * diff).sum()


def total_geometry_loss(samples_phat, cloud_q, vertices, topology: EdgeTopology, weights: LossWeights) -> torch.Tensor:
    """lambda0 * chamfer + lambda1 * edge regularizer."""
    return weights.lambda0 * chamfer_loss(samples_phat, cloud_q) + weights.lambda1 * edge_length_loss(
        vertices, topology
    )
