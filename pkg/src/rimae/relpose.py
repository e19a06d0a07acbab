"""Relative pose between patch pairs and its learnable embedding.

For patches i and j with centers c and frames F, the relative position is
``(c_i - c_j) @ F_j`` and the relative orientation is ``F_i^T @ F_j``. Both
are unchanged when the whole cloud rotates, because the rotation cancels
between the transformed centers and the transformed frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .frames import FrameNotSetError
from .patches import Patch


@dataclass(frozen=True)
class RelPose:
    rp: np.ndarray
    ro: np.ndarray

    @property
    def flat12(self) -> np.ndarray:
        """12-vector: relative position, then relative orientation row-major."""
        return np.concatenate([self.rp, self.ro.reshape(-1)])


def relative_pose(patch_i: Patch, patch_j: Patch) -> RelPose:
    if patch_i.frame is None or patch_j.frame is None:
        raise FrameNotSetError("relative pose needs both patch frames set")
    rp = (patch_i.center - patch_j.center) @ patch_j.frame
    ro = patch_i.frame.T @ patch_j.frame
    return RelPose(rp=rp, ro=ro)


def pair_encodings(
    centers: np.ndarray,
    frames: np.ndarray,
    rows: np.ndarray,
    cols: np.ndarray,
) -> np.ndarray:
    """Flat 12D encodings for the ordered pairs (rows[p], cols[p])."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    diff = centers[rows] - centers[cols]
    f_cols = frames[cols]
    rp = np.einsum("pi,pij->pj", diff, f_cols)
    ro = np.einsum("pki,pkj->pij", frames[rows], f_cols)
    return np.concatenate([rp, ro.reshape(len(rows), 9)], axis=1)


class RelPoseEmbedder:
    """Two-layer MLP lifting the 12D pose encoding to the token width.

    A single instance is shared by every encoder and decoder block.
    """

    def __init__(self, rng: np.random.Generator, width: int, hidden: int | None = None):
        from .model import Linear  # local import to avoid a module cycle

        self.width = width
        self.hidden = hidden if hidden is not None else width
        self.fc1 = Linear(rng, 12, self.hidden)
        self.fc2 = Linear(rng, self.hidden, width)

    def __call__(self, encodings) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(encodings)))

    def named_parameters(self, prefix: str = "relpose"):
        yield from self.fc1.named_parameters(f"{prefix}.fc1")
        yield from self.fc2.named_parameters(f"{prefix}.fc2")


def embed_relpose(rel: RelPose, embedder: RelPoseEmbedder) -> Tensor:
    out = embedder(rel.flat12.reshape(1, 12))
    return ad.reshape(out, (embedder.width,))


def relpose_table(
    patches: list[Patch],
    rows: np.ndarray,
    cols: np.ndarray,
    embedder: RelPoseEmbedder,
    pair_mask: np.ndarray | None = None,
) -> Tensor:
    """Embedded relative poses for rows x cols, as a (R, C, width) tensor.

    With ``pair_mask`` given, only the marked pairs are computed and embedded;
    unmarked entries stay zero.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    for idx in np.concatenate([rows, cols]):
        if patches[idx].frame is None:
            raise FrameNotSetError("relpose table needs all patch frames set")
    centers = np.stack([p.center for p in patches])
    frames = np.stack([p.frame for p in patches])

    n_rows, n_cols = len(rows), len(cols)
    if pair_mask is None:
        grid_r = np.repeat(np.arange(n_rows), n_cols)
        grid_c = np.tile(np.arange(n_cols), n_rows)
    else:
        grid_r, grid_c = np.nonzero(np.asarray(pair_mask, dtype=bool))
    feats = pair_encodings(centers, frames, rows[grid_r], cols[grid_c])
    embedded = embedder(feats)
    if pair_mask is None:
        return ad.reshape(embedded, (n_rows, n_cols, embedder.width))
    flat = ad.scatter_rows(embedded, grid_r * n_cols + grid_c, n_rows * n_cols)
    return ad.reshape(flat, (n_rows, n_cols, embedder.width))
