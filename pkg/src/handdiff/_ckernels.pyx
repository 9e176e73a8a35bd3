# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: neighbour queries, farthest point sampling, capsule
rasterisation and z-buffer point splatting.

Every routine here has a numpy twin in ``_pykernels`` and must return
bit-identical results; distances are always accumulated as
``dx*dx + dy*dy + dz*dz`` in that order.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, floor, INFINITY

cnp.import_array()


def knn(const double[:, ::1] queries, const double[:, ::1] points, Py_ssize_t k):
    cdef Py_ssize_t nq = queries.shape[0]
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t q, i, pos, filled
    cdef double dx, dy, dz, d
    out = np.empty((nq, k), dtype=np.int64)
    cdef long long[:, ::1] o = out
    cdef double[::1] best = np.empty(k, dtype=np.float64)
    for q in range(nq):
        filled = 0
        for i in range(n):
            dx = points[i, 0] - queries[q, 0]
            dy = points[i, 1] - queries[q, 1]
            dz = points[i, 2] - queries[q, 2]
            d = dx * dx + dy * dy + dz * dz
            if filled == k and d >= best[k - 1]:
                continue
            # strict comparison keeps the earlier index ahead on ties
            pos = filled if filled < k else k - 1
            while pos > 0 and best[pos - 1] > d:
                if pos < k:
                    best[pos] = best[pos - 1]
                    o[q, pos] = o[q, pos - 1]
                pos -= 1
            best[pos] = d
            o[q, pos] = i
            if filled < k:
                filled += 1
    return out


def farthest_point_sample(const double[:, ::1] points, Py_ssize_t m, Py_ssize_t seed):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t i, j, last, arg
    cdef double dx, dy, dz, d, far
    out = np.empty(m, dtype=np.int64)
    cdef long long[::1] o = out
    cdef double[::1] mind = np.full(n, INFINITY)
    o[0] = seed
    last = seed
    for j in range(1, m):
        far = -1.0
        arg = 0
        for i in range(n):
            dx = points[i, 0] - points[last, 0]
            dy = points[i, 1] - points[last, 1]
            dz = points[i, 2] - points[last, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < mind[i]:
                mind[i] = d
            if mind[i] > far:
                far = mind[i]
                arg = i
        o[j] = arg
        last = arg
    return out


cdef inline double _sphere_hit(double rx, double ry, double rz, double rr,
                               double cx, double cy, double cz, double rad2) nogil:
    cdef double b = rx * cx + ry * cy + rz * cz
    cdef double c = cx * cx + cy * cy + cz * cz - rad2
    cdef double disc = b * b - rr * c
    if disc < 0.0:
        return INFINITY
    cdef double t = (b - sqrt(disc)) / rr
    if t <= 0.0:
        return INFINITY
    return t


def render_capsules(const double[:, ::1] starts, const double[:, ::1] ends,
                    const double[::1] radii, double fx, double fy, double cx,
                    double cy, Py_ssize_t width, Py_ssize_t height):
    cdef Py_ssize_t nc = starts.shape[0]
    cdef Py_ssize_t u, v, c
    cdef double rx, ry, rz, rr, best, t, s
    cdef double ax, ay, az, L, ra, px, py, pz, qx, qy, qz, a2, b2, c2, disc
    cdef double rad2
    depth = np.zeros((height, width), dtype=np.float64)
    cdef double[:, ::1] dep = depth
    for v in range(height):
        for u in range(width):
            rx = (u - cx) / fx
            ry = (v - cy) / fy
            rz = 1.0
            rr = rx * rx + ry * ry + rz * rz
            best = INFINITY
            for c in range(nc):
                rad2 = radii[c] * radii[c]
                t = _sphere_hit(rx, ry, rz, rr, starts[c, 0], starts[c, 1], starts[c, 2], rad2)
                if t < best:
                    best = t
                t = _sphere_hit(rx, ry, rz, rr, ends[c, 0], ends[c, 1], ends[c, 2], rad2)
                if t < best:
                    best = t
                ax = ends[c, 0] - starts[c, 0]
                ay = ends[c, 1] - starts[c, 1]
                az = ends[c, 2] - starts[c, 2]
                L = sqrt(ax * ax + ay * ay + az * az)
                if L <= 0.0:
                    continue
                ax = ax / L
                ay = ay / L
                az = az / L
                ra = rx * ax + ry * ay + rz * az
                px = rx - ra * ax
                py = ry - ra * ay
                pz = rz - ra * az
                s = starts[c, 0] * ax + starts[c, 1] * ay + starts[c, 2] * az
                qx = starts[c, 0] - s * ax
                qy = starts[c, 1] - s * ay
                qz = starts[c, 2] - s * az
                a2 = px * px + py * py + pz * pz
                if a2 <= 0.0:
                    continue
                b2 = px * qx + py * qy + pz * qz
                c2 = qx * qx + qy * qy + qz * qz - rad2
                disc = b2 * b2 - a2 * c2
                if disc < 0.0:
                    continue
                t = (b2 - sqrt(disc)) / a2
                if t <= 0.0 or t >= best:
                    continue
                s = (t * rx - starts[c, 0]) * ax + (t * ry - starts[c, 1]) * ay + (t * rz - starts[c, 2]) * az
                if s >= 0.0 and s <= L:
                    best = t
            if best < INFINITY:
                dep[v, u] = best
    return depth


def splat_points(const double[:, ::1] points, double fx, double fy, double cx,
                 double cy, Py_ssize_t width, Py_ssize_t height):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t i, u, v
    cdef double z
    depth = np.zeros((height, width), dtype=np.float64)
    cdef double[:, ::1] dep = depth
    for i in range(n):
        z = points[i, 2]
        if z <= 0.0:
            continue
        u = <Py_ssize_t>floor(points[i, 0] * fx / z + cx + 0.5)
        v = <Py_ssize_t>floor(points[i, 1] * fy / z + cy + 0.5)
        if u < 0 or u >= width or v < 0 or v >= height:
            continue
        if dep[v, u] == 0.0 or z < dep[v, u]:
            dep[v, u] = z
    return depth


def scatter_add_rows(double[:, ::1] out, const long long[::1] idx, const double[:, ::1] src):
    """``out[idx[i]] += src[i]`` in row order (same accumulation order as
    ``np.add.at``)."""
    cdef Py_ssize_t n = idx.shape[0]
    cdef Py_ssize_t d = src.shape[1]
    cdef Py_ssize_t i, c, r
    for i in range(n):
        r = idx[i]
        for c in range(d):
            out[r, c] += src[i, c]


def max_pool_mid(const double[:, :, ::1] x):
    """Max over the middle axis of ``(L, K, D)``; first maximum wins."""
    cdef Py_ssize_t L = x.shape[0], K = x.shape[1], D = x.shape[2]
    cdef Py_ssize_t l, k, d
    out = np.empty((L, D), dtype=np.float64)
    arg = np.zeros((L, D), dtype=np.int64)
    cdef double[:, ::1] o = out
    cdef long long[:, ::1] a = arg
    for l in range(L):
        for d in range(D):
            o[l, d] = x[l, 0, d]
        for k in range(1, K):
            for d in range(D):
                if x[l, k, d] > o[l, d]:
                    o[l, d] = x[l, k, d]
                    a[l, d] = k
    return out, arg


def max_pool_mid_backward(const double[:, ::1] g, const long long[:, ::1] arg, Py_ssize_t K):
    cdef Py_ssize_t L = g.shape[0], D = g.shape[1]
    cdef Py_ssize_t l, d
    out = np.zeros((L, K, D), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    for l in range(L):
        for d in range(D):
            o[l, arg[l, d], d] = g[l, d]
    return out
