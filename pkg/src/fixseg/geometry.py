"""Rigid motions, per-part rigid motions, and their action on labelled clouds.

Points are row vectors, so a rigid motion maps ``x -> x @ R + t``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

ROTATION_TOL = 1e-9
REPAIR_TOL = 1e-6


class GeometryError(ValueError):
    pass


def _project_to_so3(R: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def check_rotation(R) -> np.ndarray:
    """Return ``R`` as a valid rotation, polar-projecting small drift.

    Matrices further than 1e-6 from SO(3) are rejected.
    """
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise GeometryError(f"rotation must be a finite 3x3 matrix, got shape {R.shape}")
    err = max(np.abs(R.T @ R - np.eye(3)).max(), abs(np.linalg.det(R) - 1.0))
    if err <= ROTATION_TOL:
        return R
    if err <= REPAIR_TOL:
        return _project_to_so3(R)
    raise GeometryError(f"matrix is not a rotation (orthogonality/determinant error {err:.3g})")


@dataclass(frozen=True)
class RigidTransform:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", check_rotation(self.R))
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise GeometryError("translation must be finite")
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.R + self.t

    def then(self, other: "RigidTransform") -> "RigidTransform":
        """Transform that applies ``self`` first, then ``other``."""
        return RigidTransform(self.R @ other.R, self.t @ other.R + other.t)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.R.T, -self.t @ self.R.T)

    def as_matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix acting on row vectors ``[x, 1]``."""
        M = np.eye(4)
        M[:3, :3] = self.R
        M[3, :3] = self.t
        return M


@dataclass(frozen=True)
class PartTransform:
    """An element of SE(3)^P: one rigid motion per part."""

    parts: tuple

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))

    @property
    def P(self) -> int:
        return len(self.parts)

    @classmethod
    def identity(cls, P: int) -> "PartTransform":
        return cls(tuple(RigidTransform.identity() for _ in range(P)))

    def rotations(self) -> np.ndarray:
        return np.stack([T.R for T in self.parts])

    def translations(self) -> np.ndarray:
        return np.stack([T.t for T in self.parts])


@dataclass(frozen=True)
class Pointcloud:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"pointcloud must be N x 3, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("pointcloud has non-finite coordinates")
        object.__setattr__(self, "points", pts)

    @property
    def N(self) -> int:
        return self.points.shape[0]


def _points(X) -> np.ndarray:
    return X.points if isinstance(X, Pointcloud) else np.asarray(X, dtype=np.float64)


def _assign(y) -> np.ndarray:
    return y.assign if hasattr(y, "assign") else np.asarray(y, dtype=np.float64)


def act(A: PartTransform, X, y) -> Pointcloud:
    """Move every point by the y-weighted blend of the per-part motions."""
    pts, w = _points(X), _assign(y)
    if w.ndim != 2 or w.shape[0] != pts.shape[0]:
        raise GeometryError(f"segmentation has {w.shape[0] if w.ndim == 2 else '?'} rows, cloud has {pts.shape[0]}")
    if w.shape[1] != A.P:
        raise GeometryError(f"segmentation has {w.shape[1]} parts, transform has {A.P}")
    moved = np.einsum("nk,pkj->npj", pts, A.rotations()) + A.translations()[None]
    # rows of y sum to one, so blending displacements equals blending positions;
    # this form keeps the identity action bit-exact
    disp = moved - pts[:, None, :]
    return Pointcloud(pts + np.einsum("np,npj->nj", w, disp))


def compose(A: PartTransform, B: PartTransform) -> PartTransform:
    """Part-wise composition: acting by ``compose(A, B)`` equals acting by B then A."""
    if A.P != B.P:
        raise GeometryError(f"cannot compose transforms with {A.P} and {B.P} parts")
    return PartTransform(tuple(b.then(a) for a, b in zip(A.parts, B.parts)))


def inverse(A: PartTransform) -> PartTransform:
    return PartTransform(tuple(T.inverse() for T in A.parts))


def quaternion_to_matrix(q) -> np.ndarray:
    """Row-vector rotation matrix for a unit quaternion ``(w, x, y, z)``."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    col = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    return col.T


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation via a uniformly sampled unit quaternion (Shoemake)."""
    u1, u2, u3 = rng.random(3)
    a, b = np.sqrt(1.0 - u1), np.sqrt(u1)
    q = (a * np.sin(2 * np.pi * u2), a * np.cos(2 * np.pi * u2), b * np.sin(2 * np.pi * u3), b * np.cos(2 * np.pi * u3))
    return quaternion_to_matrix(q)


def sample_random(P: int, rng: np.random.Generator, t_max: float = 1.0) -> PartTransform:
    if t_max < 0:
        raise GeometryError("t_max must be non-negative")
    parts = []
    for _ in range(P):
        R = random_rotation(rng)
        t = rng.uniform(-t_max, t_max, size=3) if t_max > 0 else np.zeros(3)
        parts.append(RigidTransform(R, t))
    return PartTransform(tuple(parts))


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Row-vector rotation by ``angle`` (right-handed) about unit ``axis``."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    col = np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)
    return col.T


def hinge_transform(axis, pivot, angle: float) -> RigidTransform:
    """Rotation about the line through ``pivot`` along ``axis``."""
    R = axis_angle_matrix(axis, angle)
    c = np.asarray(pivot, dtype=np.float64)
    return RigidTransform(R, c - c @ R)


# -- text format -------------------------------------------------------------
def read_pointcloud(path) -> tuple[Pointcloud, Optional[np.ndarray]]:
    """Parse ``x y z [label]`` lines; ``#`` lines are comments."""
    rows, labels = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) not in (3, 4):
            raise GeometryError(f"{path}:{lineno}: expected 3 or 4 columns, got {len(fields)}")
        rows.append([float(v) for v in fields[:3]])
        labels.append(int(fields[3]) if len(fields) == 4 else None)
    has = [lab is not None for lab in labels]
    if any(has) and not all(has):
        raise GeometryError(f"{path}: label column present on some lines only")
    pts = Pointcloud(np.array(rows, dtype=np.float64).reshape(-1, 3))
    return pts, (np.array(labels, dtype=np.int64) if rows and all(has) else None)


def write_pointcloud(path, X, labels: Optional[Sequence[int]] = None, comment: Optional[str] = None) -> None:
    pts = _points(X)
    lines = [f"# {c}" for c in comment.splitlines()] if comment else []
    for i, p in enumerate(pts):
        row = " ".join(repr(float(v)) for v in p)
        if labels is not None:
            row += f" {int(labels[i])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")
