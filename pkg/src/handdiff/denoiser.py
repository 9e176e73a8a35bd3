"""Joint-wise denoiser: samples local features around each noisy joint,
runs four aggregation blocks and adds a linear correction to the input pose.

Joint tensors are ``(B, H, J, 3)``: frames, hypotheses, joints.  Rows of the
flattened per-neighbour matrices are ordered ``(b, h, j, k)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from handdiff import autodiff as ad
from handdiff import kernels
from handdiff.conditioning import glorot
from handdiff.synthetic import FINGER_JOINTS, JOINTS_16

N_BLOCKS = 4
PE_PERIOD = 10000.0


class InsufficientCarriersError(ValueError):
    pass


@dataclass
class LocalSampleSet:
    offsets3: np.ndarray  # (B, H, J, K3, 3) neighbour minus joint
    rows3: np.ndarray  # (B*H*J*K3,) rows of the flattened 3D feature map
    offsets2: np.ndarray  # (B, H, J, K2, 3)
    rows2: np.ndarray  # (B*H*J*K2,) rows of the flattened 2D feature map

    @property
    def k3(self):
        return self.offsets3.shape[3]

    @property
    def k2(self):
        return self.offsets2.shape[3]


def sinusoidal(values, dim):
    """``[sin(v w_i), cos(v w_i)]`` with ``w_i = 10000^(-2i/dim)``; shape ``(len, dim)``."""
    if dim <= 0 or dim % 2:
        raise ValueError(f"embedding dim must be positive and even, got {dim}")
    v = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    w = PE_PERIOD ** (-np.arange(dim // 2) * 2.0 / dim)
    return np.concatenate([np.sin(v * w), np.cos(v * w)], axis=1)


def skeleton_edges(n_joints):
    if n_joints == 21:
        return [(0, f[0]) for f in FINGER_JOINTS] + \
            [(f[k], f[k + 1]) for f in FINGER_JOINTS for k in range(3)]
    if n_joints == 16:
        pos = {j: i for i, j in enumerate(JOINTS_16)}
        chains = [[0] + [pos[f[0]], pos[f[1]], pos[f[3]]] for f in FINGER_JOINTS]
        return [(c[k], c[k + 1]) for c in chains for k in range(3)]
    # generic chain for small test configurations
    return [(j, j + 1) for j in range(n_joints - 1)]


def init_adjacency(n_joints, dc, rng, noise=0.01):
    """Row-normalised skeleton adjacency with self loops, copied per channel,
    plus uniform noise."""
    a = np.eye(n_joints)
    for i, j in skeleton_edges(n_joints):
        a[i, j] = a[j, i] = 1.0
    a /= a.sum(axis=1, keepdims=True)
    return a[:, :, None] + rng.uniform(-noise, noise, (n_joints, n_joints, dc))


def local_width(cfg):
    """Per-neighbour input width: offset, padded feature, source flag."""
    return 3 + max(cfg.d2d, cfg.d3d) + 2 if cfg.use_lc else 3


def init_params(store, cfg, rng):
    dc, J = cfg.dc, cfg.joints
    dj = dc + cfg.dpe + (cfg.dpe if cfg.use_ji else 0)
    dl = local_width(cfg)
    for i in range(N_BLOCKS):
        p = f"block{i}."
        if cfg.use_kc:
            store.add(p + "gcn.A", init_adjacency(J, dc, rng))
            store.add(p + "gcn.W", glorot(rng, dc, dc))
        store.add(p + "mlp.w_local", glorot(rng, dl, dc))
        store.add(p + "mlp.w_joint", glorot(rng, dj, dc))
        store.add(p + "mlp.b", np.zeros(dc))
    store.add("refine.w", np.zeros((dc, 3)))


# ------------------------------------------------------------------ components


def sample_local(jt, local2d, local3d, k3, k2):
    """K3 nearest 3D carriers and K2 nearest valid 2D carriers per joint."""
    jt = np.asarray(jt, dtype=np.float64)
    B, H, J, _ = jt.shape
    car3 = local3d.carriers
    m3 = car3.shape[1]
    if not 1 <= k3 <= m3:
        raise InsufficientCarriersError(f"K3={k3} needs at least that many 3D carriers, have {m3}")
    cells = local2d.carriers.shape[1]
    off3 = np.empty((B, H, J, k3, 3))
    off2 = np.empty((B, H, J, k2, 3))
    rows3 = np.empty((B, H, J, k3), dtype=np.int64)
    rows2 = np.empty((B, H, J, k2), dtype=np.int64)
    for b in range(B):
        valid = np.flatnonzero(local2d.valid[b])
        if not 1 <= k2 <= len(valid):
            raise InsufficientCarriersError(
                f"frame {b}: K2={k2} needs that many valid 2D carriers, have {len(valid)}")
        car2 = local2d.carriers[b, valid]
        q = jt[b].reshape(H * J, 3)
        i3 = kernels.knn(q, car3[b], k3)
        i2 = kernels.knn(q, car2, k2)
        off3[b] = (car3[b][i3] - q[:, None]).reshape(H, J, k3, 3)
        off2[b] = (car2[i2] - q[:, None]).reshape(H, J, k2, 3)
        rows3[b] = (i3 + b * m3).reshape(H, J, k3)
        rows2[b] = (valid[i2] + b * cells).reshape(H, J, k2)
    return LocalSampleSet(off3, rows3.reshape(-1), off2, rows2.reshape(-1))


def _pad(x, width):
    extra = width - x.shape[-1]
    if extra == 0:
        return x
    return ad.concat([x, ad.Tensor(np.zeros(x.shape[:-1] + (extra,)))], axis=-1)


def neighbour_inputs(samples, local2d, local3d, cfg):
    """``(B*H*J, K3+K2, 3+d+2)`` tensor: offset, padded feature, one-hot source."""
    d = max(cfg.d2d, cfg.d3d)
    parts = []
    for off, rows, feats, flag in ((samples.offsets3, samples.rows3, local3d.features, (1.0, 0.0)),
                                   (samples.offsets2, samples.rows2, local2d.features, (0.0, 1.0))):
        n, k = rows.size, off.shape[3]
        f = ad.gather(ad.reshape(feats, (-1, feats.shape[-1])), rows)
        tag = np.broadcast_to(np.array(flag), (n, 2))
        x = ad.concat([ad.Tensor(off.reshape(n, 3)), _pad(f, d), ad.Tensor(tag)], axis=-1)
        parts.append(ad.reshape(x, (n // k, k, 3 + d + 2)))
    return ad.concat(parts, axis=1)


def gcn_evolve(C, A, W):
    """``ReLU((A * C) W)``: per-channel joint aggregation, shared linear map, ReLU."""
    C, A, W = ad.as_tensor(C), ad.as_tensor(A), ad.as_tensor(W)
    if C.ndim != 3 or A.shape != (C.shape[1], C.shape[1], C.shape[2]) \
            or W.shape != (C.shape[2], C.shape[2]):
        raise ad.ShapeError(f"gcn_evolve: C {C.shape}, A {A.shape}, W {W.shape} do not align")
    return ad.linear(ad.channel_graph(A, C), W, relu=True, row_stable=True)


def block_forward(x_nb, joint_in, w_local, w_joint, b):
    """Evolved neighbour features ``(R, K, dc)``.

    ``x_nb`` is ``(R, K, dl)`` (one row group per joint instance) and
    ``joint_in`` is ``(R, dj)``: the joint's condition and embeddings.  The
    one-layer MLP over ``[x_nb, joint_in]`` is split into its two weight
    blocks so the joint part is computed once per joint.
    """
    x_nb, joint_in = ad.as_tensor(x_nb), ad.as_tensor(joint_in)
    R, K, dl = x_nb.shape
    if joint_in.shape[0] != R or w_local.shape[0] != dl or w_joint.shape[0] != joint_in.shape[1]:
        raise ad.ShapeError(f"block_forward: neighbours {x_nb.shape}, joint {joint_in.shape}, "
                            f"weights {w_local.shape}/{w_joint.shape}")
    dc = w_local.shape[1]
    local = ad.matmul(ad.reshape(x_nb, (R * K, dl)), w_local)
    joint = ad.gather(ad.dense(joint_in, w_joint, row_stable=True), np.repeat(np.arange(R), K))
    return ad.reshape(ad.relu(ad.bias_add(ad.add(local, joint), b)), (R, K, dc))


def pool_update(f):
    """Channel-wise max over each joint's neighbours."""
    f = ad.as_tensor(f)
    if f.ndim != 3 or f.shape[1] == 0:
        raise ad.ShapeError(f"pool_update: need (R, K>=1, d) features, got {f.shape}")
    return ad.max_pool(f, axis=1)


def refine(c_hat, jt, w):
    """``c_hat W + jt`` with ``c_hat`` ``(R, dc)`` and ``jt`` ``(R, 3)``."""
    return ad.add(ad.dense(c_hat, w, row_stable=True), ad.as_tensor(jt))


# ------------------------------------------------------------------ full denoiser


def denoise(params, cfg, jt, cond, t):
    """Estimate clean poses ``(B, H, J, 3)`` from noisy ``jt`` at timestep(s) ``t``."""
    jt = np.asarray(jt, dtype=np.float64)
    if jt.ndim != 4 or jt.shape[3] != 3:
        raise ad.ShapeError(f"denoise: expected (B, H, J, 3) poses, got {jt.shape}")
    B, H, J, _ = jt.shape
    C = cond.joint.C
    if C.shape[:2] != (B, J):
        raise ad.ShapeError(f"denoise: conditions {C.shape} do not match poses {jt.shape}")
    R = B * H * J
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    frame_of = np.repeat(np.arange(B), H * J)
    emb = [ad.Tensor(sinusoidal(t, cfg.dpe)[frame_of])]
    if cfg.use_ji:
        emb.append(ad.Tensor(np.tile(sinusoidal(np.arange(J), cfg.dpe), (B * H, 1))))
    # hypotheses share the frame's conditions
    rep = (np.repeat(np.arange(B), H)[:, None] * J + np.arange(J)).reshape(-1)
    c = ad.reshape(ad.gather(ad.reshape(C, (B * J, cfg.dc)), rep), (B * H, J, cfg.dc))

    def neighbours():
        if not cfg.use_lc:
            return ad.Tensor(jt.reshape(R, 1, 3))
        samples = sample_local(jt, cond.local2d, cond.local3d, cfg.k3, cfg.k2)
        return neighbour_inputs(samples, cond.local2d, cond.local3d, cfg)

    x_nb = neighbours()
    for i in range(N_BLOCKS):
        p = f"block{i}."
        if cfg.use_kc:
            c = gcn_evolve(c, params[p + "gcn.A"], params[p + "gcn.W"])
        if cfg.requery_per_block and i > 0:
            x_nb = neighbours()
        joint_in = ad.concat([ad.reshape(c, (R, cfg.dc))] + emb, axis=-1)
        f = block_forward(x_nb, joint_in, params[p + "mlp.w_local"], params[p + "mlp.w_joint"],
                          params[p + "mlp.b"])
        c = ad.reshape(pool_update(f), (B * H, J, cfg.dc))
    out = refine(ad.reshape(c, (R, cfg.dc)), jt.reshape(R, 3), params["refine.w"])
    return ad.reshape(out, (B, H, J, 3))
