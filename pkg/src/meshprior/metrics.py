"""Evaluation metrics: F-score, Chamfer distance, Earth Mover's distance,
normal consistency.

These operate on the coordinates they are given; callers apply the protocol
normalization (longest GT dimension scaled to 100 for F-score, to 1 for
CD/EMD) before calling, e.g. via :func:`scale_points_by_gt`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .geometry import TriangleMesh, sample_surface

__all__ = [
    "MetricReport",
    "scale_points_by_gt",
    "f_score",
    "chamfer_metric",
    "emd_metric",
    "normal_consistency",
]


@dataclass(frozen=True)
class MetricReport:
    f_score: float
    chamfer: float
    emd: float
    normal_consistency: float

    def __post_init__(self):
        for name in ("f_score", "chamfer", "emd", "normal_consistency"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} is not finite")

    def to_record(self) -> str:
        """Flat key-value text record (one `key value` pair per line)."""
        return (
            f"f_score {self.f_score:.6f}\n"
            f"chamfer {self.chamfer:.6f}\n"
            f"emd {self.emd:.6f}\n"
            f"normal_consistency {self.normal_consistency:.6f}\n"
        )

    @classmethod
    def from_record(cls, text: str) -> "MetricReport":
        fields = {}
        for line in text.strip().splitlines():
            key, value = line.split()
            fields[key] = float(value)
        return cls(**fields)


def scale_points_by_gt(pred_points: np.ndarray, gt_points: np.ndarray, target: float):
    """Jointly rescale both sets so the GT longest bbox dimension equals target."""
    gt_points = np.asarray(gt_points, dtype=np.float64)
    extent = float((gt_points.max(axis=0) - gt_points.min(axis=0)).max())
    if extent <= 0:
        raise ValueError("ground-truth point set has zero extent")
    s = target / extent
    return np.asarray(pred_points, dtype=np.float64) * s, gt_points * s


def f_score(pred_points: np.ndarray, gt_points: np.ndarray, threshold: float = 0.1) -> float:
    """Harmonic mean of point-proximity precision and recall, scaled to [0, 100].

    Callers are expected to have rescaled both sets so the GT longest
    dimension is 100 when using the default threshold.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    pred = np.asarray(pred_points, dtype=np.float64)
    gt = np.asarray(gt_points, dtype=np.float64)
    d_pred = cKDTree(gt).query(pred, workers=-1)[0]
    d_gt = cKDTree(pred).query(gt, workers=-1)[0]
    precision = float((d_pred <= threshold).mean())
    recall = float((d_gt <= threshold).mean())
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def chamfer_metric(pred_points: np.ndarray, gt_points: np.ndarray) -> float:
    """Mean unsquared nearest-neighbor distance, both directions summed."""
    pred = np.asarray(pred_points, dtype=np.float64)
    gt = np.asarray(gt_points, dtype=np.float64)
    d_pred = cKDTree(gt).query(pred, workers=-1)[0]
    d_gt = cKDTree(pred).query(gt, workers=-1)[0]
    return float(d_pred.mean() + d_gt.mean())


def _sinkhorn_matching_cost(cost: np.ndarray, reg_factor: float = 5e-3, iterations: int = 150) -> float:
    """Entropic approximation of the uniform matching cost.

    Log-domain Sinkhorn localizes the optimal assignment; the plan's top
    entries per row/column form a sparse support on which an exact matching
    is solved. The result is always a feasible matching, so it upper-bounds
    the exact cost; the gap is verified to stay within 2% against the dense
    exact solver in the test suite.
    """
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import min_weight_full_bipartite_matching

    m = cost.shape[0]
    mean_cost = float(cost.mean())
    if mean_cost <= 0:
        return 0.0
    eps = reg_factor * mean_cost
    log_mu = -np.log(m)
    f = np.zeros(m)
    g = np.zeros(m)
    C = cost / eps
    for _ in range(iterations):
        f = -_logsumexp(g[None, :] - C, axis=1) + log_mu
        g = -_logsumexp(f[:, None] - C, axis=0) + log_mu
    log_plan = f[:, None] + g[None, :] - C

    support = 16
    while True:
        rows_top = np.argpartition(log_plan, -support, axis=1)[:, -support:]
        cols_top = np.argpartition(log_plan, -support, axis=0)[-support:, :]
        i = np.concatenate([np.repeat(np.arange(m), support), cols_top.reshape(-1)])
        j = np.concatenate([rows_top.reshape(-1), np.tile(np.arange(m), support)])
        flat = np.unique(i * m + j)  # drop duplicate edges (csr would sum them)
        i, j = flat // m, flat % m
        # +1 offset: the sparse matcher treats stored zeros as missing edges.
        sparse = csr_matrix((cost[i, j] + 1.0, (i, j)), shape=(m, m))
        try:
            r, c = min_weight_full_bipartite_matching(sparse)
        except ValueError:
            if support * 4 >= m:
                from scipy.optimize import linear_sum_assignment

                r, c = linear_sum_assignment(cost)
                return float(cost[r, c].sum())
            support *= 2
            continue
        return float((np.asarray(sparse[r, c]).ravel() - 1.0).sum())


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    amax = a.max(axis=axis, keepdims=True)
    out = np.log(np.exp(a - amax).sum(axis=axis)) + amax.squeeze(axis)
    return out


def emd_metric(
    pred_points: np.ndarray,
    gt_points: np.ndarray,
    subsample: int = 1024,
    seed: int = 0,
    exact_threshold: int = 256,
) -> float:
    """Mean per-point cost of the minimum-cost perfect matching.

    Requires equal-size sets; sets larger than ``subsample`` are reduced by a
    seeded uniform subsample. Exact (Hungarian) up to ``exact_threshold``
    points, entropic approximation above (documented gap <= 2%).
    """
    pred = np.asarray(pred_points, dtype=np.float64)
    gt = np.asarray(gt_points, dtype=np.float64)
    if len(pred) != len(gt):
        raise ValueError(f"emd_metric needs equal-size sets, got {len(pred)} vs {len(gt)}")
    if len(pred) > subsample:
        rng = np.random.default_rng(seed)
        pred = pred[rng.choice(len(pred), subsample, replace=False)]
        gt = gt[rng.choice(len(gt), subsample, replace=False)]
    cost = np.linalg.norm(pred[:, None, :] - gt[None, :, :], axis=-1)
    if len(pred) <= exact_threshold:
        r, c = linear_sum_assignment(cost)
        return float(cost[r, c].mean())
    return _sinkhorn_matching_cost(cost) / len(pred)


def normal_consistency(pred_mesh: TriangleMesh, gt_mesh: TriangleMesh, k: int = 100_000, seed: int = 0) -> float:
    """Symmetric mean absolute cosine between normals at nearest surface samples."""
    sp = sample_surface(pred_mesh, k, seed)
    sg = sample_surface(gt_mesh, k, seed + 1)
    np_pred = pred_mesh.face_normals()[sp.face_ids]
    np_gt = gt_mesh.face_normals()[sg.face_ids]
    idx_pg = cKDTree(sg.positions).query(sp.positions, workers=-1)[1]
    idx_gp = cKDTree(sp.positions).query(sg.positions, workers=-1)[1]
    fwd = np.abs(np.einsum("ij,ij->i", np_pred, np_gt[idx_pg])).mean()
    bwd = np.abs(np.einsum("ij,ij->i", np_gt, np_pred[idx_gp])).mean()
    return float(0.5 * (fwd + bwd))
