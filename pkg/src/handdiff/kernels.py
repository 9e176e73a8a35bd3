"""Backend selection for the hot geometric loops.

The compiled extension ``handdiff._ckernels`` is used when it imports and
``HANDDIFF_PURE`` is unset; otherwise the numpy versions in
``handdiff._pykernels`` are used.  Both return identical results.
"""

import os

import numpy as np

from handdiff import _pykernels

try:
    if os.environ.get("HANDDIFF_PURE", "") not in ("", "0"):
        raise ImportError("pure backend forced")
    from handdiff import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"


def _points(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"expected (n, 3) coordinates, got shape {a.shape}")
    return a


def knn(queries, points, k, impl=None):
    """Indices of the ``k`` nearest ``points`` for every query row, sorted by
    ascending distance with ties going to the lower index."""
    queries, points = _points(queries), _points(points)
    if not 1 <= k <= points.shape[0]:
        raise ValueError(f"knn: k={k} must lie in [1, {points.shape[0]}]")
    return (impl or _impl).knn(queries, points, int(k))


def farthest_point_sample(points, m, seed=0, impl=None):
    points = _points(points)
    n = points.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"farthest_point_sample: m={m} must lie in [1, {n}]")
    if not 0 <= seed < n:
        raise ValueError(f"farthest_point_sample: seed index {seed} outside [0, {n})")
    return (impl or _impl).farthest_point_sample(points, int(m), int(seed))


def render_capsules(starts, ends, radii, fx, fy, cx, cy, width, height, impl=None):
    """Nearest-surface depth (z, in the units of the inputs) of a union of
    capsules seen by a pinhole camera at the origin looking down +z; 0 where
    no capsule is hit."""
    starts, ends = _points(starts), _points(ends)
    radii = np.ascontiguousarray(radii, dtype=np.float64)
    return (impl or _impl).render_capsules(
        starts, ends, radii, float(fx), float(fy), float(cx), float(cy), int(width), int(height)
    )


def splat_points(points, fx, fy, cx, cy, width, height, impl=None):
    """Z-buffer splat of camera-space points to their nearest pixel."""
    return (impl or _impl).splat_points(
        _points(points), float(fx), float(fy), float(cx), float(cy), int(width), int(height)
    )


def scatter_add_rows(out, idx, src, impl=None):
    """Accumulate rows of ``src`` into ``out[idx]`` in place (2D, C-contiguous)."""
    (impl or _impl).scatter_add_rows(out, np.ascontiguousarray(idx, dtype=np.int64),
                                     np.ascontiguousarray(src, dtype=np.float64))
    return out


def max_pool_mid(x, impl=None):
    """Max and first argmax over the middle axis of an ``(L, K, D)`` array."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] == 0:
        raise ValueError(f"max_pool_mid: expected (L, K>=1, D), got {x.shape}")
    return (impl or _impl).max_pool_mid(x)


def max_pool_mid_backward(g, arg, K, impl=None):
    return (impl or _impl).max_pool_mid_backward(
        np.ascontiguousarray(g, dtype=np.float64), np.ascontiguousarray(arg, dtype=np.int64), int(K))
