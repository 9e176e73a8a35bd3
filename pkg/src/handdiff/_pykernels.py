"""Numpy implementations of the hot loops, used when the compiled extension
is unavailable (or forced off with ``HANDDIFF_PURE=1``)."""

import numpy as np


def _sqdist(queries, points):
    dx = points[None, :, 0] - queries[:, None, 0]
    dy = points[None, :, 1] - queries[:, None, 1]
    dz = points[None, :, 2] - queries[:, None, 2]
    return dx * dx + dy * dy + dz * dz


def knn(queries, points, k):
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    # chunk the query axis to bound the distance matrix
    step = max(1, 2_000_000 // max(points.shape[0], 1))
    for lo in range(0, queries.shape[0], step):
        d = _sqdist(queries[lo:lo + step], points)
        out[lo:lo + step] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def farthest_point_sample(points, m, seed):
    n = points.shape[0]
    out = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    out[0] = last = seed
    for j in range(1, m):
        dx = points[:, 0] - points[last, 0]
        dy = points[:, 1] - points[last, 1]
        dz = points[:, 2] - points[last, 2]
        np.minimum(mind, dx * dx + dy * dy + dz * dz, out=mind)
        last = int(np.argmax(mind))
        out[j] = last
    return out


def _sphere_hit(rx, ry, rz, rr, c, rad2):
    b = rx * c[0] + ry * c[1] + rz * c[2]
    cc = c[0] * c[0] + c[1] * c[1] + c[2] * c[2] - rad2
    disc = b * b - rr * cc
    with np.errstate(invalid="ignore"):
        t = (b - np.sqrt(disc)) / rr
    return np.where((disc >= 0.0) & (t > 0.0), t, np.inf)


def render_capsules(starts, ends, radii, fx, fy, cx, cy, width, height):
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    rx = (u - cx) / fx
    ry = (v - cy) / fy
    rz = np.ones_like(rx)
    rr = rx * rx + ry * ry + rz * rz
    best = np.full(rx.shape, np.inf)
    for a, b, rad in zip(starts, ends, radii):
        rad2 = rad * rad
        best = np.minimum(best, _sphere_hit(rx, ry, rz, rr, a, rad2))
        best = np.minimum(best, _sphere_hit(rx, ry, rz, rr, b, rad2))
        ax, ay, az = b[0] - a[0], b[1] - a[1], b[2] - a[2]
        length = np.sqrt(ax * ax + ay * ay + az * az)
        if length <= 0.0:
            continue
        ax, ay, az = ax / length, ay / length, az / length
        ra = rx * ax + ry * ay + rz * az
        px, py, pz = rx - ra * ax, ry - ra * ay, rz - ra * az
        s = a[0] * ax + a[1] * ay + a[2] * az
        qx, qy, qz = a[0] - s * ax, a[1] - s * ay, a[2] - s * az
        a2 = px * px + py * py + pz * pz
        b2 = px * qx + py * qy + pz * qz
        c2 = qx * qx + qy * qy + qz * qz - rad2
        disc = b2 * b2 - a2 * c2
        with np.errstate(invalid="ignore", divide="ignore"):
            t = (b2 - np.sqrt(disc)) / a2
            s = (t * rx - a[0]) * ax + (t * ry - a[1]) * ay + (t * rz - a[2]) * az
        ok = (a2 > 0.0) & (disc >= 0.0) & (t > 0.0) & (t < best) & (s >= 0.0) & (s <= length)
        best = np.where(ok, t, best)
    return np.where(np.isfinite(best), best, 0.0)


def splat_points(points, fx, fy, cx, cy, width, height):
    depth = np.zeros((height, width), dtype=np.float64)
    z = points[:, 2]
    front = z > 0.0
    pts, z = points[front], z[front]
    u = np.floor(pts[:, 0] * fx / z + cx + 0.5).astype(np.int64)
    v = np.floor(pts[:, 1] * fy / z + cy + 0.5).astype(np.int64)
    inside = (u >= 0) & (u < width) & (v >= 0) & (v < height)
    u, v, z = u[inside], v[inside], z[inside]
    flat = np.full(width * height, np.inf)
    np.minimum.at(flat, v * width + u, z)
    flat[~np.isfinite(flat)] = 0.0
    return flat.reshape(height, width)


def scatter_add_rows(out, idx, src):
    np.add.at(out, idx, src)


def max_pool_mid(x):
    out = x[:, 0].copy()
    arg = np.zeros(out.shape, dtype=np.int64)
    for k in range(1, x.shape[1]):
        better = x[:, k] > out
        out[better] = x[:, k][better]
        arg[better] = k
    return out, arg


def max_pool_mid_backward(g, arg, K):
    out = np.zeros((g.shape[0], K, g.shape[1]))
    np.put_along_axis(out, arg[:, None, :], g[:, None, :], axis=1)
    return out
