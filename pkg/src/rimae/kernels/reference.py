"""NumPy fallback for the geometry kernels.

The compiled extension in ``_native.pyx`` mirrors these functions operation by
operation (same comparison rules, same accumulation order), so both backends
return identical results and either can serve the rest of the package.
"""

from __future__ import annotations

import math

import numpy as np


class KernelError(RuntimeError):
    pass


def _sq_dist(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    dx = points[:, 0] - query[0]
    dy = points[:, 1] - query[1]
    dz = points[:, 2] - query[2]
    return dx * dx + dy * dy + dz * dz


def fps(points: np.ndarray, count: int) -> np.ndarray:
    """Greedy farthest point sampling starting at index 0.

    Each step picks the candidate maximizing the minimum squared distance to
    the already selected set; ties go to the lowest index. Selected indices
    are masked with a -1 sentinel so exact duplicates are never re-chosen.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = 0
    best = _sq_dist(points, points[0])
    best[0] = -1.0
    for i in range(1, count):
        j = int(np.argmax(best))
        chosen[i] = j
        np.minimum(best, _sq_dist(points, points[j]), out=best)
        best[j] = -1.0
    return chosen


def knn(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points per query, sorted by (distance, index)."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    for row in range(queries.shape[0]):
        d2 = _sq_dist(points, queries[row])
        out[row] = np.argsort(d2, kind="stable")[:k]
    return out


def jacobi_eig3(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi diagonalization of a symmetric 3x3 matrix.

    Sweeps the (0,1), (0,2), (1,2) pivots until the off-diagonal Frobenius
    norm drops below 1e-14 * (1 + sum |diagonal|), capped at 50 sweeps.
    Returns eigenvalues ascending and unit eigenvector columns, each signed so
    its largest-magnitude component is positive (earliest axis on ties).
    """
    a = np.array(mat, dtype=np.float64, copy=True)
    v = np.eye(3)
    converged = False
    for _ in range(50):
        off = math.sqrt(2.0 * (a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2))
        if off <= 1e-14 * (1.0 + abs(a[0, 0]) + abs(a[1, 1]) + abs(a[2, 2])):
            converged = True
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p, q]
            if apq == 0.0:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = 1.0 / (abs(theta) + math.sqrt(theta * theta + 1.0))
            if theta < 0.0:
                t = -t
            c = 1.0 / math.sqrt(t * t + 1.0)
            s = t * c
            r = 3 - p - q
            app = a[p, p]
            aqq = a[q, q]
            a[p, p] = app - t * apq
            a[q, q] = aqq + t * apq
            a[p, q] = 0.0
            a[q, p] = 0.0
            arp = a[r, p]
            arq = a[r, q]
            a[r, p] = c * arp - s * arq
            a[p, r] = a[r, p]
            a[r, q] = s * arp + c * arq
            a[q, r] = a[r, q]
            for i in range(3):
                vip = v[i, p]
                viq = v[i, q]
                v[i, p] = c * vip - s * viq
                v[i, q] = s * vip + c * viq
    else:
        off = math.sqrt(2.0 * (a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2))
        converged = off <= 1e-14 * (1.0 + abs(a[0, 0]) + abs(a[1, 1]) + abs(a[2, 2]))
    if not converged:
        raise KernelError("jacobi eigensolver did not converge in 50 sweeps")

    w = np.array([a[0, 0], a[1, 1], a[2, 2]])
    order = np.argsort(w, kind="stable")
    w = w[order]
    v = v[:, order]
    for j in range(3):
        col = v[:, j]
        i = int(np.argmax(np.abs(col)))
        if col[i] < 0.0:
            v[:, j] = -col
    return w, v


def pod_bin(points: np.ndarray, normals: np.ndarray, grid: int) -> np.ndarray:
    """Bin a normalized patch into a grid^3 x 10 descriptor.

    Per cell: point frequency, mean box coordinates, and the upper triangle
    (xx, xy, xz, yy, yz, zz) of the mean normal outer product. The bounding
    box extent is inflated by 1e-9 * (extent + 1) so max-corner points stay in
    the last cell; a zero-extent axis maps every point to cell 0 with box
    coordinate 0.5. Accumulation runs in a canonical per-point sort order so
    the result is exactly permutation-invariant.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    normals = np.ascontiguousarray(normals, dtype=np.float64)
    k = points.shape[0]
    mins = points.min(axis=0)
    ext = points.max(axis=0) - mins
    ext_infl = ext + 1e-9 * (ext + 1.0)
    zero = ext == 0.0

    rel = (points - mins) / ext_infl
    cells = np.floor(rel * grid).astype(np.int64)
    rel[:, zero] = 0.5
    cells[:, zero] = 0
    np.clip(cells, 0, grid - 1, out=cells)
    cell_id = (cells[:, 0] * grid + cells[:, 1]) * grid + cells[:, 2]

    mom = normals[:, (0, 0, 0, 1, 1, 2)] * normals[:, (0, 1, 2, 1, 2, 2)]
    order = np.lexsort(
        (
            mom[:, 5], mom[:, 4], mom[:, 3], mom[:, 2], mom[:, 1], mom[:, 0],
            rel[:, 2], rel[:, 1], rel[:, 0],
            cell_id,
        )
    )
    cid = cell_id[order]
    rel = rel[order]
    mom = mom[order]

    ncells = grid * grid * grid
    counts = np.zeros(ncells)
    coord_sum = np.zeros((ncells, 3))
    mom_sum = np.zeros((ncells, 6))
    np.add.at(counts, cid, 1.0)
    np.add.at(coord_sum, cid, rel)
    np.add.at(mom_sum, cid, mom)

    values = np.zeros((ncells, 10))
    occupied = counts > 0.0
    values[:, 0] = counts / k
    values[occupied, 1:4] = coord_sum[occupied] / counts[occupied, None]
    values[occupied, 4:10] = mom_sum[occupied] / counts[occupied, None]
    return values.reshape(-1)
