"""Condition encoders: a small 2D conv encoder-decoder over the depth map, a
two-level set-abstraction point encoder, and the bias-induced layers that
turn the global vectors into one condition row per joint."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from handdiff import autodiff as ad
from handdiff import kernels
from handdiff.geometry import resize_frame


@dataclass
class LocalConditions2D:
    features: ad.Tensor  # (B, S/2 * S/2, d2d), row-major cells
    carriers: np.ndarray  # (B, S/2 * S/2, 3) normalised coordinates
    valid: np.ndarray  # (B, S/2 * S/2) bool
    grid: int  # S/2


@dataclass
class LocalConditions3D:
    features: ad.Tensor  # (B, N/2, d3d)
    carriers: np.ndarray  # (B, N/2, 3)


@dataclass
class JointConditions:
    C: ad.Tensor  # (B, J, dc)
    Jc: ad.Tensor | None  # (B, J, 3) auxiliary coordinates


@dataclass
class ConditionSet:
    joint: JointConditions
    local2d: LocalConditions2D
    local3d: LocalConditions3D
    global2d: ad.Tensor
    global3d: ad.Tensor


def glorot(rng, fan_in, fan_out, shape=None):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape or (fan_in, fan_out))


def init_params(store, cfg, rng):
    c1, c2 = cfg.conv1, cfg.conv2
    store.add("enc2d.conv1.w", glorot(rng, 9 * 2, c1, (3, 3, 2, c1)))
    store.add("enc2d.conv1.b", np.zeros(c1))
    store.add("enc2d.conv2.w", glorot(rng, 9 * c1, c2, (3, 3, c1, c2)))
    store.add("enc2d.conv2.b", np.zeros(c2))
    store.add("enc2d.global.w", glorot(rng, c2, cfg.d2d))
    store.add("enc2d.global.b", np.zeros(cfg.d2d))
    store.add("enc2d.dec.w", glorot(rng, c2 + c1, cfg.d2d))
    store.add("enc2d.dec.b", np.zeros(cfg.d2d))
    d = cfg.d3d
    store.add("enc3d.sa1.w1", glorot(rng, 6, d))
    store.add("enc3d.sa1.b1", np.zeros(d))
    store.add("enc3d.sa1.w2", glorot(rng, d, d))
    store.add("enc3d.sa1.b2", np.zeros(d))
    store.add("enc3d.sa2.w1", glorot(rng, 3 + d, d))
    store.add("enc3d.sa2.b1", np.zeros(d))
    store.add("enc3d.sa2.w2", glorot(rng, d, d))
    store.add("enc3d.sa2.b2", np.zeros(d))
    g, dc, J = cfg.d2d + cfg.d3d, cfg.dc, cfg.joints
    if cfg.use_jc:
        store.add("bil.w1", glorot(rng, g, dc))
        store.add("bil.b1", rng.uniform(-0.5, 0.5, (J, dc)))
        store.add("bil.w2", glorot(rng, dc, dc))
        store.add("bil.b2", rng.uniform(-0.5, 0.5, (J, dc)))
        store.add("bil.w3", glorot(rng, dc, dc))
        store.add("bil.b3", rng.uniform(-0.5, 0.5, (J, dc)))
        store.add("jc.w", glorot(rng, dc, 3))
        store.add("jc.b", np.zeros(3))
    else:
        store.add("gcond.w", glorot(rng, g, dc))
        store.add("gcond.b", np.zeros(dc))


# ------------------------------------------------------------------ 2D branch


def depth_input(frames, clouds, size):
    """Network input ``(B, size, size, 2)``: depth normalised with each cloud's
    transform (0 where invalid) and a validity mask."""
    out = np.zeros((len(frames), size, size, 2))
    for i, (frame, cloud) in enumerate(zip(frames, clouds)):
        f = resize_frame(frame, size)
        valid = f.valid
        out[i, :, :, 0] = np.where(valid, (f.depth - cloud.centroid[2]) / cloud.scale, 0.0)
        out[i, :, :, 1] = valid
    return out


def carriers_2d(frames, clouds, size):
    """Normalised 3D positions of the half-resolution feature cells: each 2x2
    cell's valid depths are averaged and back-projected from the cell centre."""
    g = size // 2
    car = np.zeros((len(frames), g * g, 3))
    ok = np.zeros((len(frames), g * g), dtype=bool)
    for i, (frame, cloud) in enumerate(zip(frames, clouds)):
        f = resize_frame(frame, size)
        blocks = f.depth.reshape(g, 2, g, 2)
        count = (blocks > 0).sum(axis=(1, 3))
        depth = np.where(count > 0, blocks.sum(axis=(1, 3)) / np.maximum(count, 1), 0.0)
        v, u = np.mgrid[0:g, 0:g].astype(np.float64)
        u, v = 2 * u + 0.5, 2 * v + 0.5
        k = f.intrinsics
        pts = np.stack([(u - k.cx) * depth / k.fx, (v - k.cy) * depth / k.fy, depth], -1)
        car[i] = ((pts - cloud.centroid) / cloud.scale).reshape(-1, 3)
        ok[i] = (count > 0).reshape(-1)
    car[~ok] = 0.0
    return car, ok


def _upsample_index(batch, g):
    """Row indices mapping each (g x g) cell to its parent in the (g/2 x g/2) grid."""
    h = g // 2
    r, c = np.mgrid[0:g, 0:g]
    parent = (r // 2) * h + (c // 2)
    return (np.arange(batch)[:, None] * (h * h) + parent.reshape(1, -1)).reshape(-1)


def encode_2d(params, cfg, frames, clouds):
    """Half-resolution feature map, its carriers, and a global 2D vector."""
    size = cfg.image_size
    for f in frames:
        if f.height != f.width or f.height % size:
            raise ValueError(f"encode_2d expects frames resizable to {size}x{size}, "
                             f"got {f.height}x{f.width}")
    x = ad.Tensor(depth_input(frames, clouds, size))
    B = x.shape[0]
    e1 = ad.relu(ad.conv2d(x, params["enc2d.conv1.w"], params["enc2d.conv1.b"], stride=2))
    e2 = ad.relu(ad.conv2d(e1, params["enc2d.conv2.w"], params["enc2d.conv2.b"], stride=2))
    g, h = size // 2, size // 4
    deep = ad.reshape(e2, (B * h * h, cfg.conv2))
    glob = ad.linear(deep, params["enc2d.global.w"], params["enc2d.global.b"], relu=True)
    global2d = ad.max_pool(ad.reshape(glob, (B, h * h, cfg.d2d)), axis=1)
    up = ad.gather(deep, _upsample_index(B, g))
    skip = ad.reshape(e1, (B * g * g, cfg.conv1))
    feat = ad.linear(ad.concat([up, skip], axis=-1), params["enc2d.dec.w"], params["enc2d.dec.b"],
                     relu=True)
    car, ok = carriers_2d(frames, clouds, size)
    local = LocalConditions2D(ad.reshape(feat, (B, g * g, cfg.d2d)), car, ok, g)
    return local, global2d


# ------------------------------------------------------------------ 3D branch


def fps_seed(points):
    """Order-independent FPS start: the lexicographically largest point."""
    return int(np.lexsort((points[:, 2], points[:, 1], points[:, 0]))[-1])


def _set_abstraction(params, prefix, centres, points, feats, k):
    """One PointNet++ level: group ``k`` neighbours of each centre, run a
    shared two-layer MLP on ``[offset, feature]`` and max-pool.

    ``centres``/``points`` are per-frame numpy arrays; ``feats`` (or None)
    holds neighbour features as a flat ``(B * n_points, d)`` tensor.
    """
    B, M = centres.shape[:2]
    n = points.shape[1]
    idx = np.stack([kernels.knn(centres[b], points[b], k) for b in range(B)])  # (B, M, k)
    nbrs = points[np.arange(B)[:, None, None], idx]  # (B, M, k, 3)
    parts = [ad.Tensor((nbrs - centres[:, :, None]).reshape(B * M * k, 3))]
    if feats is None:
        parts.append(ad.Tensor(nbrs.reshape(B * M * k, 3)))
    else:
        parts.append(ad.gather(feats, (idx + (np.arange(B) * n)[:, None, None]).reshape(-1)))
    h = ad.linear(ad.concat(parts, axis=-1), params[prefix + ".w1"], params[prefix + ".b1"], relu=True)
    h = ad.linear(h, params[prefix + ".w2"], params[prefix + ".b2"], relu=True)
    d = h.shape[-1]
    return ad.max_pool(ad.reshape(h, (B * M, k, d)), axis=1)


def encode_3d(params, cfg, clouds):
    """``N/2`` carriers with features plus a global 3D vector."""
    pts = np.stack([c.points for c in clouds])
    B, N = pts.shape[:2]
    if N < 2:
        raise ValueError(f"encode_3d needs at least 2 points, got {N}")
    m1, m2 = N // 2, max(1, N // 8)
    k1, k2 = min(cfg.sa_k, N), min(cfg.sa_k, m1)
    idx1 = np.stack([kernels.farthest_point_sample(p, m1, fps_seed(p)) for p in pts])
    car1 = np.take_along_axis(pts, idx1[..., None], axis=1)
    f1 = _set_abstraction(params, "enc3d.sa1", car1, pts, None, k1)
    idx2 = np.stack([kernels.farthest_point_sample(c, m2, fps_seed(c)) for c in car1])
    car2 = np.take_along_axis(car1, idx2[..., None], axis=1)
    f2 = _set_abstraction(params, "enc3d.sa2", car2, car1, f1, k2)
    global3d = ad.max_pool(ad.reshape(f2, (B, m2, cfg.d3d)), axis=1)
    return LocalConditions3D(ad.reshape(f1, (B, m1, cfg.d3d)), car1), global3d


# ------------------------------------------------------------------ joint-wise conditions


def extract_joint_conditions(params, cfg, global2d, global3d, n_joints=None):
    """Replicate the concatenated global vector per joint and run the three
    bias-induced layers (shared weights, per-joint biases).  Without
    joint-wise conditions every joint gets the same shared projection."""
    J = cfg.joints if n_joints is None else n_joints
    if J <= 0:
        raise ValueError(f"joint count must be positive, got {J}")
    g = ad.concat([global2d, global3d], axis=-1)
    B = g.shape[0]
    rep = np.repeat(np.arange(B), J)
    if not cfg.use_jc:
        shared = ad.linear(g, params["gcond.w"], params["gcond.b"], relu=True)
        return JointConditions(ad.reshape(ad.gather(shared, rep), (B, J, cfg.dc)), None)
    # the shared first-layer product is identical for every joint, so it is
    # computed once per frame and replicated before the per-joint bias
    h = ad.reshape(ad.gather(ad.matmul(g, params["bil.w1"]), rep), (B, J, cfg.dc))
    h = ad.relu(ad.bias_add(h, params["bil.b1"]))
    h = ad.relu(ad.bias_add(ad.linear(h, params["bil.w2"]), params["bil.b2"]))
    h = ad.bias_add(ad.linear(h, params["bil.w3"]), params["bil.b3"])
    jc = ad.linear(h, params["jc.w"], params["jc.b"])
    return JointConditions(h, jc)


def encode(params, cfg, samples):
    frames = [s.frame for s in samples]
    clouds = [s.cloud for s in samples]
    local2d, g2 = encode_2d(params, cfg, frames, clouds)
    local3d, g3 = encode_3d(params, cfg, clouds)
    joint = extract_joint_conditions(params, cfg, g2, g3)
    return ConditionSet(joint, local2d, local3d, g2, g3)
