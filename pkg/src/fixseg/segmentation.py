"""Soft segmentations, the part-permutation quotient metric, and matched IoU."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

ROW_TOL = 1e-6
ENTRY_TOL = 1e-9


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class SoftSegmentation:
    """N x P row-stochastic point-part assignment."""

    assign: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.assign, dtype=np.float64)
        if y.ndim != 2 or y.shape[1] < 1:
            raise SegmentationError(f"segmentation must be N x P, got shape {y.shape}")
        if not np.all(np.isfinite(y)):
            raise SegmentationError("segmentation has non-finite entries")
        if y.size and (y.min() < -ENTRY_TOL or y.max() > 1 + ENTRY_TOL):
            raise SegmentationError(f"entries outside [0, 1]: range [{y.min():.3g}, {y.max():.3g}]")
        rows = y.sum(axis=1)
        if y.size and np.abs(rows - 1.0).max() > ROW_TOL:
            raise SegmentationError(f"rows must sum to 1 (max deviation {np.abs(rows - 1).max():.3g})")
        object.__setattr__(self, "assign", np.clip(y, 0.0, 1.0))

    @property
    def N(self) -> int:
        return self.assign.shape[0]

    @property
    def P(self) -> int:
        return self.assign.shape[1]

    @classmethod
    def from_labels(cls, labels: Sequence[int], P: Optional[int] = None) -> "SoftSegmentation":
        labels = np.asarray(labels, dtype=np.int64)
        P = int(labels.max()) + 1 if P is None else P
        if labels.size and (labels.min() < 0 or labels.max() >= P):
            raise SegmentationError(f"labels must lie in [0, {P})")
        return cls(np.eye(P)[labels])

    def hard_labels(self) -> np.ndarray:
        """Row argmax; ties go to the lowest part index."""
        return np.argmax(self.assign, axis=1)

    def permuted(self, perm: Sequence[int]) -> "SoftSegmentation":
        """Column ``j`` of the result is column ``perm[j]`` of this segmentation."""
        return SoftSegmentation(self.assign[:, np.asarray(perm)])


def _arr(y) -> np.ndarray:
    return y.assign if isinstance(y, SoftSegmentation) else np.asarray(y, dtype=np.float64)


def is_permutation(perm) -> bool:
    perm = np.asarray(perm)
    return perm.ndim == 1 and np.array_equal(np.sort(perm), np.arange(perm.size))


def assignment_solve(profit) -> np.ndarray:
    """Permutation ``perm`` maximising ``sum_i profit[i, perm[i]]``."""
    profit = np.asarray(profit, dtype=np.float64)
    if profit.ndim != 2 or profit.shape[0] != profit.shape[1]:
        raise SegmentationError(f"profit matrix must be square, got {profit.shape}")
    if not np.all(np.isfinite(profit)):
        raise SegmentationError("profit matrix has non-finite entries")
    rows, cols = linear_sum_assignment(profit, maximize=True)
    perm = np.empty(profit.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm


def quotient_distance(y1, y2) -> tuple[float, np.ndarray]:
    """min over column permutations ``s`` of ``||y1[:, s] - y2||_F``.

    Minimising the squared distance is maximising ``sum_j <y1[:, s_j], y2[:, j]>``,
    an assignment problem on the P x P matrix ``y2^T y1``. Returns the distance and
    the minimising ``s``.
    """
    a, b = _arr(y1), _arr(y2)
    if a.shape != b.shape:
        raise SegmentationError(f"shape mismatch {a.shape} vs {b.shape}")
    perm = assignment_solve(b.T @ a)
    return float(np.linalg.norm(a[:, perm] - b)), perm


def _group_list(P: int, groups) -> list:
    if groups is None:
        return [list(range(P))]
    flat = sorted(p for g in groups for p in g)
    if flat != list(range(P)):
        raise SegmentationError(f"semantic groups {groups} do not partition {P} parts")
    return [list(g) for g in groups]


def matched_iou(pred, gt, per_semantic_groups=None, return_parts: bool = False):
    """Mean part IoU after optimal matching of hardened predictions to ground truth.

    Matching is restricted to within each semantic group; with no grouping every
    part may match every other. Ground-truth parts with no points are skipped.
    """
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape:
        raise SegmentationError(f"shape mismatch {p.shape} vs {g.shape}")
    P = p.shape[1]
    hp = np.eye(P, dtype=bool)[np.argmax(p, axis=1)]
    hg = np.eye(P, dtype=bool)[np.argmax(g, axis=1)]
    inter = hp.T.astype(np.int64) @ hg.astype(np.int64)
    union = hp.sum(0)[:, None] + hg.sum(0)[None, :] - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    per_part = np.full(P, np.nan)
    for grp in _group_list(P, per_semantic_groups):
        sub = iou[np.ix_(grp, grp)]
        perm = assignment_solve(sub.T)
        for j, gi in enumerate(grp):
            per_part[gi] = sub[perm[j], j]
    present = hg.sum(0) > 0
    if not present.all():
        warnings.warn(f"ground-truth parts {np.flatnonzero(~present).tolist()} are empty; excluded from IoU")
    score = float(per_part[present].mean()) if present.any() else float("nan")
    return (score, per_part) if return_parts else score


def normalize_rows(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y / y.sum(axis=1, keepdims=True)


def noisy_init(y_gt, alpha: float, rng: np.random.Generator, renormalize: bool = True):
    """``(1 - alpha) * y_gt + alpha * xi`` with ``xi ~ U(0, 1)`` entrywise."""
    if not 0.0 <= alpha <= 1.0:
        raise SegmentationError("alpha must lie in [0, 1]")
    g = _arr(y_gt)
    xi = rng.random(g.shape)
    blend = (1.0 - alpha) * g + alpha * xi
    if not renormalize:
        return blend
    if alpha == 0.0:
        return SoftSegmentation(g.copy())
    return SoftSegmentation(normalize_rows(blend))


def uniform_random_init(N: int, P: int, rng: np.random.Generator) -> SoftSegmentation:
    """Rows are softmaxes of i.i.d. standard normal logits."""
    if N < 1 or P < 1:
        raise SegmentationError("N and P must be positive")
    z = rng.standard_normal((N, P))
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return SoftSegmentation(e / e.sum(axis=1, keepdims=True))


def write_csv(path, y) -> None:
    a = _arr(y)
    Path(path).write_text("\n".join(",".join(repr(float(v)) for v in row) for row in a) + "\n")


def read_csv(path) -> SoftSegmentation:
    rows = [[float(v) for v in line.split(",")] for line in Path(path).read_text().splitlines() if line.strip()]
    return SoftSegmentation(np.array(rows))
