# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled geometry kernels.

Every function mirrors its counterpart in ``reference.py`` with identical
comparison rules and accumulation order, so results are bit-identical between
backends.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport fabs, floor, sqrt

from .reference import KernelError

cnp.import_array()


def fps(points_in, Py_ssize_t count):
    points_arr = np.ascontiguousarray(points_in, dtype=np.float64)
    cdef const double[:, ::1] pts = points_arr
    cdef Py_ssize_t n = pts.shape[0]
    chosen_arr = np.empty(count, dtype=np.int64)
    cdef long long[::1] chosen = chosen_arr
    best_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] best = best_arr
    cdef Py_ssize_t i, j, sel
    cdef double dx, dy, dz, d2, top
    cdef double qx, qy, qz

    chosen[0] = 0
    qx = pts[0, 0]; qy = pts[0, 1]; qz = pts[0, 2]
    for j in range(n):
        dx = pts[j, 0] - qx
        dy = pts[j, 1] - qy
        dz = pts[j, 2] - qz
        best[j] = dx * dx + dy * dy + dz * dz
    best[0] = -1.0

    for i in range(1, count):
        sel = 0
        top = best[0]
        for j in range(1, n):
            if best[j] > top:
                top = best[j]
                sel = j
        chosen[i] = sel
        qx = pts[sel, 0]; qy = pts[sel, 1]; qz = pts[sel, 2]
        for j in range(n):
            dx = pts[j, 0] - qx
            dy = pts[j, 1] - qy
            dz = pts[j, 2] - qz
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best[j]:
                best[j] = d2
        best[sel] = -1.0
    return chosen_arr


def knn(points_in, queries_in, Py_ssize_t k):
    points_arr = np.ascontiguousarray(points_in, dtype=np.float64)
    queries_arr = np.ascontiguousarray(queries_in, dtype=np.float64)
    cdef const double[:, ::1] pts = points_arr
    cdef const double[:, ::1] qs = queries_arr
    cdef Py_ssize_t n = pts.shape[0]
    cdef Py_ssize_t nq = qs.shape[0]
    out_arr = np.empty((nq, k), dtype=np.int64)
    cdef long long[:, ::1] out = out_arr
    bestd_arr = np.empty(k, dtype=np.float64)
    besti_arr = np.empty(k, dtype=np.int64)
    cdef double[::1] bestd = bestd_arr
    cdef long long[::1] besti = besti_arr
    cdef Py_ssize_t row, i, j, pos, filled
    cdef double dx, dy, dz, qx, qy, qz, d2

    # bounded insertion keeps the k best (distance, index) pairs in ascending
    # lexicographic order, matching a stable argsort prefix exactly
    for row in range(nq):
        qx = qs[row, 0]; qy = qs[row, 1]; qz = qs[row, 2]
        filled = 0
        for j in range(n):
            dx = pts[j, 0] - qx
            dy = pts[j, 1] - qy
            dz = pts[j, 2] - qz
            d2 = dx * dx + dy * dy + dz * dz
            if filled == k and d2 >= bestd[k - 1]:
                continue  # ties at the boundary keep the earlier index
            pos = filled if filled < k else k - 1
            while pos > 0 and bestd[pos - 1] > d2:
                bestd[pos] = bestd[pos - 1]
                besti[pos] = besti[pos - 1]
                pos -= 1
            bestd[pos] = d2
            besti[pos] = j
            if filled < k:
                filled += 1
        for i in range(k):
            out[row, i] = besti[i]
    return out_arr


def jacobi_eig3(mat_in):
    mat_arr = np.array(mat_in, dtype=np.float64, copy=True, order="C")
    cdef double[:, ::1] a = mat_arr
    v_arr = np.eye(3)
    cdef double[:, ::1] v = v_arr
    cdef int sweep, i, j, p, q, r
    cdef double off, apq, theta, t, c, s, app, aqq, arp, arq, vip, viq
    cdef bint converged = False

    for sweep in range(50):
        off = sqrt(2.0 * (a[0, 1] * a[0, 1] + a[0, 2] * a[0, 2] + a[1, 2] * a[1, 2]))
        if off <= 1e-14 * (1.0 + fabs(a[0, 0]) + fabs(a[1, 1]) + fabs(a[2, 2])):
            converged = True
            break
        for p in range(2):
            for q in range(p + 1, 3):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 / (fabs(theta) + sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / sqrt(t * t + 1.0)
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
    if not converged:
        off = sqrt(2.0 * (a[0, 1] * a[0, 1] + a[0, 2] * a[0, 2] + a[1, 2] * a[1, 2]))
        converged = off <= 1e-14 * (1.0 + fabs(a[0, 0]) + fabs(a[1, 1]) + fabs(a[2, 2]))
    if not converged:
        raise KernelError("jacobi eigensolver did not converge in 50 sweeps")

    w_arr = np.empty(3, dtype=np.float64)
    cdef double[::1] w = w_arr
    cdef long long[3] order
    cdef long long key
    w[0] = a[0, 0]; w[1] = a[1, 1]; w[2] = a[2, 2]
    # stable insertion sort of the eigenvalue order (ties keep pivot order)
    order[0] = 0; order[1] = 1; order[2] = 2
    for i in range(1, 3):
        key = order[i]
        j = i - 1
        while j >= 0 and w[order[j]] > w[key]:
            order[j + 1] = order[j]
            j -= 1
        order[j + 1] = key

    w_sorted = np.empty(3, dtype=np.float64)
    v_sorted = np.empty((3, 3), dtype=np.float64)
    cdef double[::1] ws = w_sorted
    cdef double[:, ::1] vs = v_sorted
    cdef int col, imax
    cdef double amax
    for j in range(3):
        col = <int> order[j]
        ws[j] = w[col]
        for i in range(3):
            vs[i, j] = v[i, col]
        imax = 0
        amax = fabs(vs[0, j])
        for i in range(1, 3):
            if fabs(vs[i, j]) > amax:
                amax = fabs(vs[i, j])
                imax = i
        if vs[imax, j] < 0.0:
            for i in range(3):
                vs[i, j] = -vs[i, j]
    return w_sorted, v_sorted


cdef int _pod_key_less(double[::1] cid, double[:, ::1] rel, double[:, ::1] mom,
                       Py_ssize_t x, Py_ssize_t y) nogil:
    cdef int c
    if cid[x] != cid[y]:
        return cid[x] < cid[y]
    for c in range(3):
        if rel[x, c] != rel[y, c]:
            return rel[x, c] < rel[y, c]
    for c in range(6):
        if mom[x, c] != mom[y, c]:
            return mom[x, c] < mom[y, c]
    return 0


def pod_bin(points_in, normals_in, int grid):
    points_arr = np.ascontiguousarray(points_in, dtype=np.float64)
    normals_arr = np.ascontiguousarray(normals_in, dtype=np.float64)
    cdef const double[:, ::1] pts = points_arr
    cdef const double[:, ::1] nrm = normals_arr
    cdef Py_ssize_t k = pts.shape[0]
    cdef Py_ssize_t i, j, c
    cdef double lo, hi, val

    cdef double[3] mins
    cdef double[3] ext
    cdef double[3] ext_infl
    for c in range(3):
        lo = pts[0, c]
        hi = pts[0, c]
        for i in range(1, k):
            val = pts[i, c]
            if val < lo:
                lo = val
            if val > hi:
                hi = val
        mins[c] = lo
        ext[c] = hi - lo
        ext_infl[c] = ext[c] + 1e-9 * (ext[c] + 1.0)

    rel_arr = np.empty((k, 3), dtype=np.float64)
    mom_arr = np.empty((k, 6), dtype=np.float64)
    cid_arr = np.empty(k, dtype=np.float64)
    cdef double[:, ::1] rel = rel_arr
    cdef double[:, ::1] mom = mom_arr
    cdef double[::1] cid = cid_arr
    cdef long long cell, cx
    cdef double t
    for i in range(k):
        cell = 0
        for c in range(3):
            t = (pts[i, c] - mins[c]) / ext_infl[c]
            cx = <long long> floor(t * grid)
            if ext[c] == 0.0:
                t = 0.5
                cx = 0
            if cx < 0:
                cx = 0
            if cx > grid - 1:
                cx = grid - 1
            rel[i, c] = t
            cell = cell * grid + cx
        cid[i] = <double> cell
        mom[i, 0] = nrm[i, 0] * nrm[i, 0]
        mom[i, 1] = nrm[i, 0] * nrm[i, 1]
        mom[i, 2] = nrm[i, 0] * nrm[i, 2]
        mom[i, 3] = nrm[i, 1] * nrm[i, 1]
        mom[i, 4] = nrm[i, 1] * nrm[i, 2]
        mom[i, 5] = nrm[i, 2] * nrm[i, 2]

    # canonical accumulation order: stable insertion sort by full point record
    order_arr = np.empty(k, dtype=np.int64)
    cdef long long[::1] order = order_arr
    cdef long long keyi
    for i in range(k):
        order[i] = i
    for i in range(1, k):
        keyi = order[i]
        j = i - 1
        while j >= 0 and _pod_key_less(cid, rel, mom, keyi, order[j]):
            order[j + 1] = order[j]
            j -= 1
        order[j + 1] = keyi

    cdef Py_ssize_t ncells = grid * grid * grid
    values_arr = np.zeros(ncells * 10, dtype=np.float64)
    cdef double[::1] values = values_arr
    counts_arr = np.zeros(ncells, dtype=np.float64)
    cdef double[::1] counts = counts_arr
    cdef Py_ssize_t p_idx, base
    for i in range(k):
        p_idx = <Py_ssize_t> order[i]
        cell = <long long> cid[p_idx]
        base = cell * 10
        counts[cell] += 1.0
        for c in range(3):
            values[base + 1 + c] += rel[p_idx, c]
        for c in range(6):
            values[base + 4 + c] += mom[p_idx, c]

    for i in range(ncells):
        base = i * 10
        values[base] = counts[i] / k
        if counts[i] > 0.0:
            for c in range(9):
                values[base + 1 + c] /= counts[i]
    return values_arr
