"""Point-cloud data model, OPC text I/O, synthetic shapes, and rigid transforms.

Row-vector convention throughout: a rotation acts as ``p' = p @ R``. All
arrays are float64 and frozen read-only after construction, so values can be
shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_NORMAL_TOL = 1e-9
SHAPE_KINDS = ("sphere", "cube", "torus", "two_planes")

TORUS_MAJOR = 1.0
TORUS_MINOR = 0.4
CUBE_EXPONENT = 8.0
SHEET_BOW = 0.15


class OpcFormatError(ValueError):
    """Raised for malformed OPC byte streams."""


def _frozen(values, shape=None) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, order="C")
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected array of shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PointCloud:
    """n points with optional unit normals, both (n, 3) float64."""

    positions: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64, order="C")
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError("positions must have shape (n, 3)")
        if pos.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.isfinite(pos).all():
            raise ValueError("positions contain non-finite values")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=np.float64, order="C")
            if nrm.shape != pos.shape:
                raise ValueError("normals must match positions in shape")
            if not np.isfinite(nrm).all():
                raise ValueError("normals contain non-finite values")
            norms = np.linalg.norm(nrm, axis=1)
            if np.abs(norms - 1.0).max() > UNIT_NORMAL_TOL:
                raise ValueError("normals must be unit length")
            nrm.setflags(write=False)
            object.__setattr__(self, "normals", nrm)

    @property
    def n(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class Rotation:
    """Proper rotation matrix, validated to 1e-12."""

    matrix: np.ndarray

    def __post_init__(self):
        mat = _frozen(self.matrix, (3, 3))
        if np.abs(mat.T @ mat - np.eye(3)).max() > 1e-12:
            raise ValueError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(mat) - 1.0) > 1e-12:
            raise ValueError("rotation matrix must have determinant +1")
        object.__setattr__(self, "matrix", mat)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))


def load_point_cloud(data: bytes) -> PointCloud:
    """Parse the OPC text format (see ``save_point_cloud``)."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise OpcFormatError("stream is not valid UTF-8") from exc
    lines = [ln for ln in text.split("\n") if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise OpcFormatError("malformed header: empty stream")
    header = lines[0].split()
    if len(header) != 3 or header[0] != "OPC":
        raise OpcFormatError(f"malformed header: {lines[0]!r}")
    try:
        n = int(header[1])
        flag = int(header[2])
    except ValueError as exc:
        raise OpcFormatError(f"malformed header: {lines[0]!r}") from exc
    if flag not in (0, 1):
        raise OpcFormatError(f"malformed header: normals flag must be 0 or 1, got {flag}")
    rows = lines[1:]
    if len(rows) != n:
        raise OpcFormatError(f"row count mismatch: header declares {n}, found {len(rows)}")

    width = 6 if flag else 3
    values = np.empty((n, width))
    for i, row in enumerate(rows):
        fields = row.split()
        if len(fields) != width:
            raise OpcFormatError(f"malformed row {i}: expected {width} values, got {len(fields)}")
        try:
            values[i] = [float(f) for f in fields]
        except ValueError as exc:
            raise OpcFormatError(f"malformed row {i}: {row!r}") from exc
    if not np.isfinite(values).all():
        raise OpcFormatError("non-finite value in point data")

    positions = values[:, :3]
    normals = None
    if flag:
        normals = values[:, 3:6]
        norms = np.linalg.norm(normals, axis=1)
        if (norms < 1e-6).any():
            raise OpcFormatError("non-normalizable normal (norm < 1e-6)")
        if np.abs(norms - 1.0).max() > 1e-3:
            raise OpcFormatError("normal norm deviates from unit by more than 1e-3")
        normals = normals / norms[:, None]
    return PointCloud(positions, normals)


def save_point_cloud(pc: PointCloud) -> bytes:
    """Serialize to OPC text: ``OPC <n> <has_normals>`` then one point per line.

    Values are printed with 17 significant digits, which round-trips float64
    exactly.
    """
    has_normals = pc.normals is not None
    out = [f"OPC {pc.n} {1 if has_normals else 0}"]
    data = np.hstack([pc.positions, pc.normals]) if has_normals else pc.positions
    for row in data:
        out.append(" ".join(f"{v:.17g}" for v in row))
    return ("\n".join(out) + "\n").encode("utf-8")


def _sample_sphere(rng: np.random.Generator, n: int):
    pts = rng.standard_normal((n, 3))
    norms = np.linalg.norm(pts, axis=1)
    while (norms < 1e-12).any():
        bad = norms < 1e-12
        pts[bad] = rng.standard_normal((int(bad.sum()), 3))
        norms = np.linalg.norm(pts, axis=1)
    pts = pts / norms[:, None]
    return pts, pts.copy()


def _sample_cube(rng: np.random.Generator, n: int):
    # superellipsoid |x|^8 + |y|^8 + |z|^8 = 1: a cube with gently rounded
    # faces, so every local patch has curvature and a well-defined frame
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-1.0, 1.0, (n, 2))
    w = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        rows = axis == a
        others = [c for c in range(3) if c != a]
        w[rows, a] = sign[rows]
        w[rows, others[0]] = uv[rows, 0]
        w[rows, others[1]] = uv[rows, 1]
    scale = (np.abs(w) ** CUBE_EXPONENT).sum(axis=1) ** (1.0 / CUBE_EXPONENT)
    pts = w / scale[:, None]
    grad = np.sign(pts) * np.abs(pts) ** (CUBE_EXPONENT - 1.0)
    normals = grad / np.linalg.norm(grad, axis=1)[:, None]
    return pts, normals


def _sample_torus(rng: np.random.Generator, n: int):
    # area-uniform via rejection on the tube angle
    us = np.empty(0)
    vs = np.empty(0)
    while us.size < n:
        m = 2 * (n - us.size) + 16
        u = rng.uniform(0.0, 2.0 * np.pi, m)
        v = rng.uniform(0.0, 2.0 * np.pi, m)
        accept = rng.uniform(0.0, 1.0, m) < (TORUS_MAJOR + TORUS_MINOR * np.cos(v)) / (
            TORUS_MAJOR + TORUS_MINOR
        )
        us = np.concatenate([us, u[accept]])
        vs = np.concatenate([vs, v[accept]])
    u, v = us[:n], vs[:n]
    ring = TORUS_MAJOR + TORUS_MINOR * np.cos(v)
    pts = np.stack([ring * np.cos(u), ring * np.sin(u), TORUS_MINOR * np.sin(v)], axis=1)
    normals = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
    return pts, normals


def _sample_two_planes(rng: np.random.Generator, n: int):
    # two non-parallel, slightly bowed sheets; the bow keeps patch frames
    # rotation-stable where a perfectly flat sheet would leave the first LRF
    # axis sign undetermined
    n_a = n // 2
    n_b = n - n_a
    xy = rng.uniform(-1.0, 1.0, (n_a, 2))
    z = SHEET_BOW * (xy[:, 0] ** 2 + 0.5 * xy[:, 1] ** 2)
    pts_a = np.column_stack([xy[:, 0], xy[:, 1], z])
    grad_a = np.column_stack(
        [-2.0 * SHEET_BOW * xy[:, 0], -SHEET_BOW * xy[:, 1], np.ones(n_a)]
    )
    yz = rng.uniform(-1.0, 1.0, (n_b, 2))
    x = SHEET_BOW * (yz[:, 0] ** 2 + 0.5 * yz[:, 1] ** 2)
    pts_b = np.column_stack([x, yz[:, 0], yz[:, 1]])
    grad_b = np.column_stack(
        [np.ones(n_b), -2.0 * SHEET_BOW * yz[:, 0], -SHEET_BOW * yz[:, 1]]
    )
    pts = np.vstack([pts_a, pts_b])
    grad = np.vstack([grad_a, grad_b])
    normals = grad / np.linalg.norm(grad, axis=1)[:, None]
    return pts, normals


_GENERATORS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "torus": _sample_torus,
    "two_planes": _sample_two_planes,
}


def generate_shape(kind: str, n: int, seed: int) -> PointCloud:
    """Sample n surface points with analytic unit normals, deterministically."""
    if kind not in _GENERATORS:
        raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")
    if n < 16:
        raise ValueError("need at least 16 points")
    rng = np.random.default_rng(seed)
    pts, normals = _GENERATORS[kind](rng, n)
    return PointCloud(pts, normals)


def generate_dataset(count: int, n: int, seed: int) -> list[PointCloud]:
    """Deterministic mixed-kind dataset cycling through all shape kinds."""
    clouds = []
    for i in range(count):
        child = int(np.random.SeedSequence((seed, i)).generate_state(1)[0])
        clouds.append(generate_shape(SHAPE_KINDS[i % len(SHAPE_KINDS)], n, child))
    return clouds


def random_rotation(seed: int) -> Rotation:
    """Uniform SO(3) rotation from a normalized 4-normal quaternion."""
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1e-12:
        q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    mat = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    return Rotation(mat)


def apply_rotation(pc: PointCloud, rotation: Rotation) -> PointCloud:
    r = rotation.matrix
    normals = pc.normals @ r if pc.normals is not None else None
    return PointCloud(pc.positions @ r, normals)


def _scale_with_factors(pc: PointCloud, factors: np.ndarray) -> PointCloud:
    factors = np.asarray(factors, dtype=np.float64)
    positions = pc.positions * factors
    normals = None
    if pc.normals is not None:
        # normals transform by the inverse transpose of diag(factors)
        nrm = pc.normals / factors
        normals = nrm / np.linalg.norm(nrm, axis=1)[:, None]
    return PointCloud(positions, normals)


def anisotropic_scale(pc: PointCloud, seed: int) -> PointCloud:
    """Per-axis scaling with factors drawn uniformly from [0.8, 1.2]."""
    factors = np.random.default_rng(seed).uniform(0.8, 1.2, 3)
    return _scale_with_factors(pc, factors)
