"""Local reference frame construction and patch rotation normalization.

The frame of a patch is an orthonormal right-handed basis (e1, e2, e3),
stored as matrix columns:

  e1  eigenvector of the patch covariance with the smallest eigenvalue,
      signed to point away from the patch mass (outward-normal rule);
  e2  the center-to-barycenter vector projected orthogonal to e1;
  e3  e1 x e2.

Expressing member points in this basis cancels any global rotation of the
cloud, which is what the rest of the pipeline builds on.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import kernels
from .patches import Patch

DEGENERATE_E2_TOL = 1e-8


class FrameNotSetError(ValueError):
    """Raised when an operation needs a patch frame that was never computed."""


@dataclass(frozen=True)
class EigenDecomp3:
    """Eigenvalues ascending; unit eigenvector columns paired by position."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def covariance3(points: np.ndarray) -> np.ndarray:
    """Barycenter-centered covariance (1/k) * sum (p - mean)(p - mean)^T."""
    points = np.asarray(points, dtype=np.float64)
    k = points.shape[0]
    if k < 3:
        raise ValueError("covariance needs at least 3 points")
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / k
    return (cov + cov.T) / 2.0


def eig_sym3(mat: np.ndarray) -> EigenDecomp3:
    """Jacobi eigendecomposition of a symmetric 3x3 matrix."""
    mat = np.asarray(mat, dtype=np.float64)
    if not np.isfinite(mat).all():
        raise ValueError("matrix entries must be finite")
    w, v = kernels.jacobi_eig3(mat)
    return EigenDecomp3(eigenvalues=w, eigenvectors=v)


def compute_lrf(patch: Patch) -> tuple[np.ndarray, bool]:
    """Frame matrix for a patch, plus a flag for the degenerate-e2 fallback."""
    pts = patch.points
    decomp = eig_sym3(covariance3(pts))
    e1 = decomp.eigenvectors[:, 0]
    mass = pts.sum(axis=0)
    # outward rule: sum over members of (center - p) . e1 >= 0, center = 0;
    # an exact zero keeps the eigensolver's sign convention
    if float(mass @ e1) > 0.0:
        e1 = -e1

    radius = float(np.sqrt((pts * pts).sum(axis=1).max()))
    barycenter = mass / pts.shape[0]
    proj = barycenter - (barycenter @ e1) * e1
    degenerate = radius == 0.0 or np.linalg.norm(proj) < DEGENERATE_E2_TOL * radius
    if degenerate:
        mid = decomp.eigenvectors[:, 1]
        proj = mid - (mid @ e1) * e1
    e2 = proj / np.linalg.norm(proj)
    e3 = np.cross(e1, e2)
    return np.column_stack([e1, e2, e3]), degenerate


def attach_frames(patches: list[Patch]) -> list[Patch]:
    """Return patches with their frames filled in."""
    out = []
    for patch in patches:
        frame, degenerate = compute_lrf(patch)
        out.append(dataclasses.replace(patch, frame=frame, degenerate=degenerate))
    return out


def rotation_normalize(patch: Patch) -> tuple[np.ndarray, np.ndarray | None]:
    """Member points (and normals, when present) expressed in the patch frame."""
    if patch.frame is None:
        raise FrameNotSetError("patch frame not set; run attach_frames first")
    normals = patch.normals @ patch.frame if patch.normals is not None else None
    return patch.points @ patch.frame, normals
