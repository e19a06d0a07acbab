"""Grid descriptors of rotation-normalized patches: the reconstruction target.

A patch is normalized into its local frame, its bounding box split into a
G x G x G grid, and each cell described by 10 values: point frequency, mean
box coordinates, and the upper triangle of the mean normal outer product.
Because the inputs are frame-normalized, the descriptor is unchanged when the
source cloud rotates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .frames import rotation_normalize
from .patches import MaskSplit, Patch

CHANNELS = 10


@dataclass(frozen=True)
class PodTarget:
    grid_size: int
    values: np.ndarray

    def __post_init__(self):
        expected = self.grid_size**3 * CHANNELS
        if self.values.shape != (expected,):
            raise ValueError(f"expected {expected} values, got {self.values.shape}")


def pod_grid(norm_points: np.ndarray, norm_normals: np.ndarray, grid_size: int) -> PodTarget:
    """Descriptor of an already rotation-normalized patch."""
    norm_points = np.asarray(norm_points, dtype=np.float64)
    norm_normals = np.asarray(norm_normals, dtype=np.float64)
    if norm_points.ndim != 2 or norm_points.shape[0] == 0:
        raise ValueError("need at least one point")
    if norm_normals.shape != norm_points.shape:
        raise ValueError("normals must match points in shape")
    values = kernels.pod_bin(norm_points, norm_normals, grid_size)
    return PodTarget(grid_size=grid_size, values=values)


def pod_targets_for_masked(
    patches: list[Patch], split: MaskSplit, grid_size: int
) -> list[PodTarget]:
    """One descriptor per masked patch, in masked order."""
    out = []
    for idx in split.masked:
        patch = patches[idx]
        if patch.normals is None:
            raise ValueError("masked patches need normals to build grid targets")
        pts, nrm = rotation_normalize(patch)
        out.append(pod_grid(pts, nrm, grid_size))
    return out
