"""Farthest point sampling, kNN grouping, patch construction, mask splits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .cloud import PointCloud


@dataclass(frozen=True)
class Patch:
    """Local region: k member points stored relative to an FPS center.

    ``frame`` is the 3x3 local reference frame with the axes as columns; it is
    None until the frame module fills it in. ``normals`` are the members'
    cloud-frame unit normals when the source cloud has them.
    """

    points: np.ndarray
    center: np.ndarray
    frame: np.ndarray | None
    normals: np.ndarray | None
    member_indices: np.ndarray
    center_index: int
    degenerate: bool = False

    @property
    def size(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class MaskSplit:
    """Disjoint visible/masked patch index sets covering 0..num_patches-1."""

    visible: np.ndarray
    masked: np.ndarray

    def __post_init__(self):
        vis = np.asarray(self.visible, dtype=np.int64)
        msk = np.asarray(self.masked, dtype=np.int64)
        total = vis.size + msk.size
        combined = np.concatenate([vis, msk])
        if np.unique(combined).size != total or combined.min(initial=0) < 0 or (
            total and combined.max() != total - 1
        ):
            raise ValueError("visible and masked must partition 0..n-1")
        object.__setattr__(self, "visible", vis)
        object.__setattr__(self, "masked", msk)

    @property
    def num_patches(self) -> int:
        return self.visible.size + self.masked.size


def farthest_point_sample(points: np.ndarray, count: int) -> np.ndarray:
    """FPS indices, starting at index 0, ties broken by lowest index."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= count <= n:
        raise ValueError(f"sample count {count} out of range for {n} points")
    return kernels.fps(points, count)


def knn(points: np.ndarray, query: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points to query, sorted by (distance, index)."""
    points = np.asarray(points, dtype=np.float64)
    if k > points.shape[0]:
        raise ValueError(f"k={k} exceeds point count {points.shape[0]}")
    query = np.asarray(query, dtype=np.float64).reshape(1, 3)
    return kernels.knn(points, query, k)[0]


def build_patches(pc: PointCloud, num_patches: int, patch_size: int) -> list[Patch]:
    """Group the cloud into (possibly overlapping) kNN patches around FPS centers."""
    positions = pc.positions
    if patch_size > pc.n:
        raise ValueError(f"patch size {patch_size} exceeds cloud size {pc.n}")
    center_idx = farthest_point_sample(positions, num_patches)
    centers = positions[center_idx]
    members = kernels.knn(positions, centers, patch_size)
    out = []
    for c_idx, row in zip(center_idx, members):
        center = positions[c_idx]
        out.append(
            Patch(
                points=positions[row] - center,
                center=center.copy(),
                frame=None,
                normals=pc.normals[row].copy() if pc.normals is not None else None,
                member_indices=row.copy(),
                center_index=int(c_idx),
            )
        )
    return out


def masked_count(num_patches: int, mask_percent: float) -> int:
    """Number of masked patches: round-half-up of percent * num_patches / 100."""
    if not 0 <= mask_percent <= 100:
        raise ValueError("mask percent must lie in [0, 100]")
    if float(mask_percent).is_integer():
        return (2 * int(mask_percent) * num_patches + 100) // 200
    return int(math.floor(mask_percent / 100.0 * num_patches + 0.5))


def mask_split(num_patches: int, mask_percent: float, seed: int) -> MaskSplit:
    """Seeded random visible/masked partition; percent 0 leaves all visible."""
    n_masked = masked_count(num_patches, mask_percent)
    perm = np.random.default_rng(seed).permutation(num_patches)
    return MaskSplit(
        visible=np.sort(perm[n_masked:]),
        masked=np.sort(perm[:n_masked]),
    )
