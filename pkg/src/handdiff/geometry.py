"""Camera model, point-cloud normalisation, sampling, neighbour queries and
online augmentation.

Coordinates are camera-space millimetres (x right, y down, z forward)
unless a function says "normalised", meaning ``(p - centroid) / scale``
with the transform stored on the :class:`PointCloud`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from handdiff import kernels


class EmptyFrameError(ValueError):
    pass


class DegenerateCloudError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def scaled(self, factor):
        """Intrinsics after resizing the image by ``factor`` (pixel centres kept aligned)."""
        return CameraIntrinsics(self.fx * factor, self.fy * factor,
                                (self.cx + 0.5) * factor - 0.5, (self.cy + 0.5) * factor - 0.5)


@dataclass
class DepthFrame:
    depth: np.ndarray  # (H, W) millimetres, 0 = invalid
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2:
            raise ValueError(f"depth must be 2D, got shape {self.depth.shape}")
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise ValueError("depth values must be finite and non-negative")

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]

    @property
    def valid(self):
        return self.depth > 0


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) normalised
    centroid: np.ndarray  # (3,) mm
    scale: float  # mm

    def denormalize(self, pts=None):
        pts = self.points if pts is None else np.asarray(pts)
        return pts * self.scale + self.centroid

    def to_normalized(self, pts_mm):
        return (np.asarray(pts_mm, dtype=np.float64) - self.centroid) / self.scale

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class AugmentationParams:
    rotation_deg: float = 0.0
    scale: float = 1.0
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not -180.0 <= self.rotation_deg <= 180.0:
            raise ValueError(f"rotation {self.rotation_deg} outside [-180, 180] degrees")
        if not 0.8 <= self.scale <= 1.2:
            raise ValueError(f"scale {self.scale} outside [0.8, 1.2]")
        if len(self.translation) != 3 or any(not -20.0 <= t <= 20.0 for t in self.translation):
            raise ValueError(f"translation {self.translation} outside [-20, 20] mm")

    @property
    def is_identity(self):
        return self.rotation_deg == 0.0 and self.scale == 1.0 and not any(self.translation)


@dataclass
class FrameSample:
    frame: DepthFrame
    cloud: PointCloud
    joints_mm: np.ndarray  # (J, 3) camera space
    frame_id: int = 0
    joints_norm: np.ndarray = field(init=False)

    def __post_init__(self):
        self.joints_mm = np.asarray(self.joints_mm, dtype=np.float64)
        self.joints_norm = self.cloud.to_normalized(self.joints_mm)


# ------------------------------------------------------------------- camera


def backproject(frame):
    """One camera-space point per valid pixel, row-major pixel order."""
    v, u = np.nonzero(frame.valid)
    if u.size == 0:
        raise EmptyFrameError("depth frame has no valid pixels")
    d = frame.depth[v, u]
    k = frame.intrinsics
    return np.stack([(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d], axis=1)


def project(points, intrinsics):
    """Pixel coordinates ``(u, v)`` of camera-space points."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    return np.stack([points[..., 0] * intrinsics.fx / z + intrinsics.cx,
                     points[..., 1] * intrinsics.fy / z + intrinsics.cy], axis=-1)


def resize_frame(frame, size):
    """Shrink a square-able frame by an integer factor to ``size`` pixels per
    side, averaging the valid depths of each block."""
    h, w = frame.depth.shape
    if (h, w) == (size, size):
        return frame
    if h != w or h % size:
        raise ValueError(f"cannot resize a {h}x{w} frame to {size}x{size}")
    f = h // size
    blocks = frame.depth.reshape(size, f, size, f)
    count = (blocks > 0).sum(axis=(1, 3))
    total = blocks.sum(axis=(1, 3))
    depth = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return DepthFrame(depth, frame.intrinsics.scaled(1.0 / f))


# ------------------------------------------------------------------- clouds


def normalize(points):
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] == 0:
        raise ValueError(f"normalize needs a non-empty (N, 3) array, got {points.shape}")
    centroid = points.mean(axis=0)
    centred = points - centroid
    scale = float(np.sqrt((centred * centred).sum(axis=1).max()))
    if scale == 0.0:
        raise DegenerateCloudError("all points coincide; scale is zero")
    return PointCloud(centred / scale, centroid, scale)


def sample_points(points, n, rng):
    """Random subset of ``n`` rows; with replacement only when fewer exist."""
    m = points.shape[0]
    if m == 0:
        raise EmptyFrameError("no points to sample")
    idx = rng.choice(m, size=n, replace=m < n)
    return points[idx]


def cloud_from_frame(frame, n, rng):
    return normalize(sample_points(backproject(frame), n, rng))


def farthest_point_sample(points, m, seed_index=0):
    """Greedy farthest-point subset of ``m`` indices starting at ``seed_index``;
    argmax ties go to the lowest index."""
    if isinstance(points, PointCloud):
        points = points.points
    return kernels.farthest_point_sample(points, m, seed_index)


def knn(query, points, k):
    """``k`` nearest indices of a single 3-vector plus offsets ``neighbour - query``."""
    query = np.asarray(query, dtype=np.float64).reshape(1, 3)
    points = np.asarray(points, dtype=np.float64)
    idx = kernels.knn(query, points, k)[0]
    return idx, points[idx] - query[0]


def knn_batch(queries, points, k):
    return kernels.knn(queries, points, k)


# ------------------------------------------------------------------- augmentation


def rotation_z(deg):
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_augmentation(rng, rotation=180.0, scale=(0.8, 1.2), translation=20.0):
    return AugmentationParams(
        rotation_deg=float(rng.uniform(-rotation, rotation)),
        scale=float(rng.uniform(*scale)),
        translation=tuple(float(t) for t in rng.uniform(-translation, translation, 3)),
    )


def augment(sample, params):
    """Rotate about the view axis through the cloud centroid, scale about the
    centroid, then translate; applied identically to depth, cloud and joints.

    The normalised cloud and joints only rotate (centroid and scale absorb the
    rest), and the depth map is re-rendered by z-buffer splatting of its own
    back-projected pixels.
    """
    if params.is_identity:
        return replace(sample)
    rot = rotation_z(params.rotation_deg)
    c = sample.cloud.centroid
    shift = np.asarray(params.translation, dtype=np.float64)

    def move(p):
        return params.scale * (p - c) @ rot.T + c + shift

    cloud = PointCloud(sample.cloud.points @ rot.T, c + shift, sample.cloud.scale * params.scale)
    k = sample.frame.intrinsics
    if sample.frame.valid.any():
        warped = kernels.splat_points(move(backproject(sample.frame)), k.fx, k.fy, k.cx, k.cy,
                                      sample.frame.width, sample.frame.height)
    else:
        warped = np.zeros_like(sample.frame.depth)
    out = FrameSample(DepthFrame(warped, k), cloud, move(sample.joints_mm), sample.frame_id)
    # keep the normalised pose an exact rotation of the original
    out.joints_norm = sample.joints_norm @ rot.T
    return out
