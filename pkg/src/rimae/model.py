"""Pose-aware point transformer: patch embedder, sparse attention encoder and
decoder, prediction head, and feature heads.

Tokens are built from frame-normalized patches, so they carry no trace of the
cloud's global orientation; attention re-injects geometry through embedded
relative poses, both as a score term and as an additive value term. Odd
blocks attend to per-query nearest-neighbor targets, even blocks to a shared
farthest-point-sampled target set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cloud import PointCloud
from .frames import attach_frames, rotation_normalize
from .patches import Patch, build_patches, farthest_point_sample
from .pod import CHANNELS
from .relpose import RelPoseEmbedder, pair_encodings


@dataclass(frozen=True)
class ModelConfig:
    token_dim: int = 384
    num_heads: int = 6
    enc_blocks: int = 12
    dec_blocks: int = 4
    pod_grid: int = 6
    mlp_ratio: int = 4
    finetune_targets: int = 16
    num_points: int = 1024
    num_patches: int = 64
    patch_size: int = 32

    def __post_init__(self):
        if self.token_dim % self.num_heads != 0:
            raise ValueError("token_dim must be divisible by num_heads")
        for name in (
            "token_dim", "num_heads", "enc_blocks", "dec_blocks", "pod_grid",
            "mlp_ratio", "finetune_targets", "num_points", "num_patches", "patch_size",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.token_dim // self.num_heads

    @property
    def pod_dim(self) -> int:
        return self.pod_grid**3 * CHANNELS

    @property
    def feature_dim(self) -> int:
        return self.enc_blocks * self.token_dim

    def pretrain_targets(self, num_tokens: int) -> int:
        """Attention target count during pretraining: a quarter of the tokens."""
        return max(1, num_tokens // 4)

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def desk_scale(cls) -> "ModelConfig":
        """Small preset that keeps every test CPU-cheap.

        The grid is 2 here: with 16-point patches, finer grids are dominated
        by occupancy noise that no predictor can remove, which would put the
        training-effectiveness bar out of reach at this scale.
        """
        return cls(
            token_dim=48, num_heads=2, enc_blocks=4, dec_blocks=2, pod_grid=2,
            num_points=256, num_patches=16, patch_size=16,
        )

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Minimal preset for finite-difference gradient checking."""
        return cls(
            token_dim=8, num_heads=2, enc_blocks=2, dec_blocks=1, pod_grid=2,
            mlp_ratio=2, num_points=32, num_patches=6, patch_size=8,
        )


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    while True:
        bad = np.abs(out) > 2.0
        count = int(bad.sum())
        if count == 0:
            break
        out[bad] = rng.standard_normal(count)
    return out * std


class Linear:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int):
        self.weight = Tensor(_trunc_normal(rng, (d_in, d_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class LayerNormParams:
    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


class PatchEmbedder:
    """Two per-point MLP stages with max pooling; exactly permutation-invariant."""

    def __init__(self, rng: np.random.Generator, token_dim: int):
        half = token_dim // 2
        self.half = half
        self.pre1 = Linear(rng, 3, half)
        self.pre2 = Linear(rng, half, half)
        self.post1 = Linear(rng, token_dim, token_dim)
        self.post2 = Linear(rng, token_dim, token_dim)

    def __call__(self, points) -> Tensor:
        data = points.data if isinstance(points, Tensor) else np.asarray(points)
        m, k, _ = data.shape
        h = self.pre2(ad.gelu(self.pre1(points)))  # (m, k, half)
        pooled = ad.reshape(ad.tmax(h, axis=1), (m, 1, self.half))
        combined = ad.concat([h, ad.broadcast_to(pooled, (m, k, self.half))], axis=2)
        h2 = self.post2(ad.gelu(self.post1(combined)))  # (m, k, token_dim)
        return ad.tmax(h2, axis=1)

    def named_parameters(self, prefix: str = "embedder"):
        yield from self.pre1.named_parameters(f"{prefix}.pre1")
        yield from self.pre2.named_parameters(f"{prefix}.pre2")
        yield from self.post1.named_parameters(f"{prefix}.post1")
        yield from self.post2.named_parameters(f"{prefix}.post2")


class TransformerBlock:
    """Pre-norm attention + feed-forward, both with residual connections."""

    def __init__(self, rng: np.random.Generator, token_dim: int, mlp_ratio: int):
        self.ln1 = LayerNormParams(token_dim)
        self.query = Linear(rng, token_dim, token_dim)
        self.key = Linear(rng, token_dim, token_dim)
        self.value = Linear(rng, token_dim, token_dim)
        self.out = Linear(rng, token_dim, token_dim)
        self.ln2 = LayerNormParams(token_dim)
        self.ff1 = Linear(rng, token_dim, mlp_ratio * token_dim)
        self.ff2 = Linear(rng, mlp_ratio * token_dim, token_dim)

    def named_parameters(self, prefix: str):
        yield from self.ln1.named_parameters(f"{prefix}.ln1")
        yield from self.query.named_parameters(f"{prefix}.query")
        yield from self.key.named_parameters(f"{prefix}.key")
        yield from self.value.named_parameters(f"{prefix}.value")
        yield from self.out.named_parameters(f"{prefix}.out")
        yield from self.ln2.named_parameters(f"{prefix}.ln2")
        yield from self.ff1.named_parameters(f"{prefix}.ff1")
        yield from self.ff2.named_parameters(f"{prefix}.ff2")


class ModelState:
    """Every learnable tensor of the model, built deterministically from a seed."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.embedder = PatchEmbedder(rng, config.token_dim)
        self.relpose = RelPoseEmbedder(rng, config.token_dim)
        self.encoder = [
            TransformerBlock(rng, config.token_dim, config.mlp_ratio)
            for _ in range(config.enc_blocks)
        ]
        self.decoder = [
            TransformerBlock(rng, config.token_dim, config.mlp_ratio)
            for _ in range(config.dec_blocks)
        ]
        self.mask_token = Tensor(_trunc_normal(rng, (1, config.token_dim)), requires_grad=True)
        self.head = Linear(rng, config.token_dim, config.pod_dim)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params: list[tuple[str, Tensor]] = []
        params.extend(self.embedder.named_parameters("embedder"))
        params.extend(self.relpose.named_parameters("relpose"))
        for i, block in enumerate(self.encoder):
            params.extend(block.named_parameters(f"encoder.{i}"))
        for i, block in enumerate(self.decoder):
            params.extend(block.named_parameters(f"decoder.{i}"))
        params.append(("mask_token", self.mask_token))
        params.extend(self.head.named_parameters("head"))
        return params

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        """Overwrite every parameter from a name -> array mapping."""
        named = dict(self.named_parameters())
        missing = set(named) - set(tensors)
        if missing:
            raise ValueError(f"missing tensor {sorted(missing)[0]!r}")
        extra = set(tensors) - set(named)
        if extra:
            raise ValueError(f"unknown tensor {sorted(extra)[0]!r}")
        for name, tensor in named.items():
            arr = np.asarray(tensors[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise ValueError(
                    f"tensor shape mismatch for {name!r}: "
                    f"expected {tensor.data.shape}, got {arr.shape}"
                )
            tensor.data = arr.copy()


@dataclass
class TokenSet:
    """Refined tokens plus the patch geometry they belong to."""

    tokens: Tensor
    centers: np.ndarray
    frames: np.ndarray
    patch_indices: np.ndarray


def select_targets_local(centers: np.ndarray, query_index: int, count: int) -> np.ndarray:
    """The min(count, m) token centers nearest to the query center (self first)."""
    from . import kernels

    centers = np.asarray(centers, dtype=np.float64)
    count = min(count, centers.shape[0])
    return kernels.knn(centers, centers[query_index].reshape(1, 3), count)[0]


def select_targets_global(centers: np.ndarray, count: int, anchor: int = 0) -> np.ndarray:
    """A shared target set: farthest point sampling over the token centers.

    ``anchor`` picks the FPS start position. The pipeline anchors on the patch
    whose center has the lowest cloud-point index, which is invariant to both
    rotation and patch-list order.
    """
    centers = np.asarray(centers, dtype=np.float64)
    count = min(count, centers.shape[0])
    if anchor == 0:
        return farthest_point_sample(centers, count)
    rolled = np.concatenate([centers[anchor:], centers[:anchor]])
    picked = farthest_point_sample(rolled, count)
    return (picked + anchor) % centers.shape[0]


def _local_target_table(centers: np.ndarray, count: int) -> np.ndarray:
    from . import kernels

    centers = np.asarray(centers, dtype=np.float64)
    count = min(count, centers.shape[0])
    return kernels.knn(centers, centers, count)


def pose_attention(
    block: TransformerBlock,
    tokens: Tensor,
    targets: np.ndarray,
    rel: Tensor,
    num_heads: int,
    return_weights: bool = False,
):
    """One pre-norm block of relative-pose-aware attention.

    ``targets`` is the (m, t) per-query index table and ``rel`` the matching
    (m, t, token_dim) pose embeddings. Per head, the score adds the query dot
    the pose slice, and the value adds the pose slice itself; with the pose
    embeddings zeroed this is exactly ordinary softmax attention.
    """
    m, dim = tokens.data.shape
    t = targets.shape[1]
    dh = dim // num_heads

    normed = block.ln1(tokens)
    q = ad.reshape(block.query(normed), (m, 1, num_heads, dh))
    k = ad.reshape(ad.gather_rows(block.key(normed), targets), (m, t, num_heads, dh))
    v = ad.reshape(ad.gather_rows(block.value(normed), targets), (m, t, num_heads, dh))
    r = ad.reshape(rel, (m, t, num_heads, dh))

    # q . k + q . r == q . (k + r), per head
    scores = ad.scale(ad.tsum(ad.mul(q, ad.add(k, r)), axis=3), 1.0 / math.sqrt(dh))
    weights = ad.softmax(scores, axis=1)  # (m, t, heads)
    mixed = ad.tsum(
        ad.mul(ad.reshape(weights, (m, t, num_heads, 1)), ad.add(v, r)), axis=1
    )
    attended = ad.add(tokens, block.out(ad.reshape(mixed, (m, dim))))
    ff = block.ff2(ad.gelu(block.ff1(block.ln2(attended))))
    out = ad.add(attended, ff)
    if return_weights:
        return out, weights
    return out


def _pair_table(
    state: ModelState,
    centers: np.ndarray,
    frames: np.ndarray,
    targets: np.ndarray,
    pose_mode: str,
) -> Tensor:
    """Embedded pose encodings aligned with a (m, t) target table."""
    m, t = targets.shape
    rows = np.repeat(np.arange(m), t)
    cols = targets.reshape(-1)
    if pose_mode == "relative":
        feats = pair_encodings(centers, frames, rows, cols)
    elif pose_mode == "absolute":
        # diagnostic mode: absolute pose of the target patch; deliberately
        # rotation-covariant, used to show the invariance harness has power
        feats = np.concatenate(
            [centers[cols], frames[cols].reshape(len(cols), 9)], axis=1
        )
    else:
        raise ValueError(f"unknown pose mode {pose_mode!r}")
    embedded = state.relpose(feats)
    return ad.reshape(embedded, (m, t, state.config.token_dim))


def _anchor_position(patch_indices: np.ndarray, patches: list[Patch]) -> int:
    center_ids = np.array([patches[i].center_index for i in patch_indices])
    return int(np.argmin(center_ids))


def _run_blocks(
    state: ModelState,
    blocks: list[TransformerBlock],
    tokens: Tensor,
    centers: np.ndarray,
    frames: np.ndarray,
    t_local: int,
    t_global: int,
    anchor: int,
    pose_mode: str = "relative",
) -> list[Tensor]:
    local_targets = _local_target_table(centers, t_local)
    glob = select_targets_global(centers, t_global, anchor=anchor)
    global_targets = np.broadcast_to(glob, (centers.shape[0], glob.size)).copy()
    rel_local = _pair_table(state, centers, frames, local_targets, pose_mode)
    rel_global = _pair_table(state, centers, frames, global_targets, pose_mode)

    outputs = []
    for index, block in enumerate(blocks):
        if index % 2 == 0:  # 1-based odd block: local attention
            tokens = pose_attention(block, tokens, local_targets, rel_local, state.config.num_heads)
        else:
            tokens = pose_attention(block, tokens, global_targets, rel_global, state.config.num_heads)
        outputs.append(tokens)
    return outputs


def encoder_forward(
    state: ModelState,
    patches: list[Patch],
    visible: np.ndarray | None = None,
    mode: str = "finetune",
    pose_mode: str = "relative",
) -> list[TokenSet]:
    """Embed and refine the visible patches; returns every block's output."""
    cfg = state.config
    if visible is None:
        visible = np.arange(len(patches))
    visible = np.asarray(visible, dtype=np.int64)
    chosen = [patches[i] for i in visible]
    for patch in chosen:
        if patch.frame is None:
            raise ValueError("encoder needs patch frames set")

    if pose_mode == "absolute":
        norm_points = np.stack([p.points for p in chosen])
    else:
        norm_points = np.stack([rotation_normalize(p)[0] for p in chosen])
    centers = np.stack([p.center for p in chosen])
    frames = np.stack([p.frame for p in chosen])

    tokens = state.embedder(norm_points)
    m = len(chosen)
    if mode == "pretrain":
        t_count = cfg.pretrain_targets(m)
    elif mode == "finetune":
        t_count = min(cfg.finetune_targets, m)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    anchor = _anchor_position(visible, patches)
    outputs = _run_blocks(
        state, state.encoder, tokens, centers, frames, t_count, t_count, anchor, pose_mode
    )
    return [TokenSet(tokens=t, centers=centers, frames=frames, patch_indices=visible) for t in outputs]


def decoder_forward(
    state: ModelState,
    encoded_visible: Tensor,
    patches: list[Patch],
    visible: np.ndarray,
    masked: np.ndarray,
) -> Tensor:
    """Predict grid descriptors for the masked patches.

    The token list is the encoded visible tokens followed by copies of the
    learned mask token; the pose tables cover all patches, so the mask tokens
    know where they sit even though they carry no content.
    """
    cfg = state.config
    masked = np.asarray(masked, dtype=np.int64)
    visible = np.asarray(visible, dtype=np.int64)
    n_masked = masked.size
    if n_masked == 0:
        raise ValueError("no masked patches")
    order = np.concatenate([visible, masked])
    centers = np.stack([patches[i].center for i in order])
    frames = np.stack([patches[i].frame for i in order])

    mask_tokens = ad.gather_rows(state.mask_token, np.zeros(n_masked, dtype=np.int64))
    tokens = ad.concat([encoded_visible, mask_tokens], axis=0)

    total = order.size
    t_count = max(1, total // 4)
    anchor = _anchor_position(order, patches)
    outputs = _run_blocks(
        state, state.decoder, tokens, centers, frames, t_count, t_count, anchor
    )
    refined_masked = ad.slice_rows(outputs[-1], visible.size, total)
    return state.head(refined_masked)


def global_feature(block_outputs: list[TokenSet]) -> Tensor:
    """Per-block token means, concatenated in block order."""
    parts = []
    for ts in block_outputs:
        m = ts.tokens.data.shape[0]
        parts.append(ad.scale(ad.tsum(ts.tokens, axis=0), 1.0 / m))
    return ad.concat(parts, axis=0)


def propagate_pointwise(token_set: TokenSet, pc: PointCloud) -> np.ndarray:
    """Inverse-distance interpolation of tokens onto every cloud point.

    Each point mixes the tokens of its 3 nearest patch centers with weights
    1 / (distance + 1e-9)^2.
    """
    from . import kernels

    tokens = token_set.tokens.data
    centers = token_set.centers
    k = min(3, centers.shape[0])
    nearest = kernels.knn(centers, pc.positions, k)
    diffs = centers[nearest] - pc.positions[:, None, :]
    dist = np.sqrt((diffs * diffs).sum(axis=2))
    w = 1.0 / (dist + 1e-9) ** 2
    w = w / w.sum(axis=1, keepdims=True)
    return np.einsum("nk,nkd->nd", w, tokens[nearest])


def prepare_patches(pc: PointCloud, cfg: ModelConfig) -> list[Patch]:
    """Patchify a cloud and attach local frames."""
    return attach_frames(build_patches(pc, cfg.num_patches, cfg.patch_size))


def encode_cloud(
    state: ModelState,
    pc: PointCloud,
    mode: str = "finetune",
    visible: np.ndarray | None = None,
    pose_mode: str = "relative",
) -> list[TokenSet]:
    return encoder_forward(
        state, prepare_patches(pc, state.config), visible=visible, mode=mode, pose_mode=pose_mode
    )


def cloud_feature(state: ModelState, pc: PointCloud, pose_mode: str = "relative") -> np.ndarray:
    """Finetune-mode global feature of a cloud as a plain array."""
    return global_feature(encode_cloud(state, pc, pose_mode=pose_mode)).data
