import numpy as np
import pytest

from handdiff import autodiff as ad
from handdiff import conditioning as cnd
from handdiff import synthetic as syn
from handdiff.config import make_config
from handdiff.geometry import CameraIntrinsics, DepthFrame, FrameSample, PointCloud, normalize
from handdiff.optim import ParamStore

from conftest import check_grads


def tiny_cfg(**kw):
    base = dict(image_size=16, n_points=32, d2d=4, d3d=5, dc=8, dpe=4, conv1=3, conv2=4,
                k3=4, k2=4, sa_k=4, joints=4)
    base.update(kw)
    return make_config("fast", **base)


def params_for(cfg, seed=0):
    ps = ParamStore()
    cnd.init_params(ps, cfg, np.random.default_rng(seed))
    return ps


@pytest.fixture(scope="module")
def frames():
    return syn.generate_dataset(5, 3, n_points=32)


def test_shapes_fast_profile():
    cfg = make_config("fast")
    samples = syn.generate_dataset(0, 2, n_points=cfg.n_points)
    ps = params_for(cfg)
    cond = cnd.encode(ps, cfg, samples)
    g = cfg.image_size // 2
    assert cond.local2d.features.shape == (2, g * g, cfg.d2d)
    assert cond.local2d.grid == g
    assert cond.local3d.features.shape == (2, cfg.n_points // 2, cfg.d3d)
    assert cond.local3d.carriers.shape == (2, cfg.n_points // 2, 3)
    assert cond.global2d.shape == (2, cfg.d2d) and cond.global3d.shape == (2, cfg.d3d)
    assert cond.joint.C.shape == (2, 21, cfg.dc) and cond.joint.Jc.shape == (2, 21, 3)


def test_full_size_128_input_gives_64_grid():
    cfg = make_config("paper", d2d=8, d3d=8, dc=8, n_points=1024)
    samples = syn.generate_dataset(0, 1, n_points=1024)
    ps = params_for(cfg)
    l2, _ = cnd.encode_2d(ps, cfg, [s.frame for s in samples], [s.cloud for s in samples])
    assert l2.grid == 64 and l2.features.shape == (1, 64 * 64, 8)
    l3, _ = cnd.encode_3d(ps, cfg, [s.cloud for s in samples])
    assert l3.carriers.shape == (1, 512, 3)


def test_wrong_input_size_rejected(frames):
    cfg = tiny_cfg()
    ps = params_for(cfg)
    odd = DepthFrame(frames[0].frame.depth[:100, :100], frames[0].frame.intrinsics)
    with pytest.raises(ValueError):
        cnd.encode_2d(ps, cfg, [odd], [frames[0].cloud])


def test_all_zero_depth(frames):
    cfg = tiny_cfg()
    ps = params_for(cfg)
    empty = DepthFrame(np.zeros((128, 128)), frames[0].frame.intrinsics)
    local, glob = cnd.encode_2d(ps, cfg, [empty], [frames[0].cloud])
    assert not local.valid.any()
    assert np.isfinite(local.features.data).all() and np.isfinite(glob.data).all()


def test_carriers_backproject_cell_average():
    k = CameraIntrinsics(10.0, 10.0, 1.5, 1.5)
    depth = np.zeros((4, 4))
    depth[0, 0], depth[1, 1] = 100.0, 200.0  # cell (0, 0): mean 150
    depth[3, 3] = 50.0
    cloud = PointCloud(np.zeros((1, 3)), np.zeros(3), 1.0)
    car, ok = cnd.carriers_2d([DepthFrame(depth, k)], [cloud], 4)
    assert ok[0].tolist() == [True, False, False, True]
    # cell centre (0.5, 0.5): x = (0.5 - 1.5) * 150 / 10
    np.testing.assert_allclose(car[0, 0], [-15.0, -15.0, 150.0])
    np.testing.assert_allclose(car[0, 3], [(2.5 - 1.5) * 5.0, (2.5 - 1.5) * 5.0, 50.0])
    assert car[0, 1].tolist() == [0.0, 0.0, 0.0]


def test_encode_deterministic(frames):
    cfg = tiny_cfg()
    a = cnd.encode(params_for(cfg), cfg, frames)
    b = cnd.encode(params_for(cfg), cfg, [FrameSample(s.frame, s.cloud, s.joints_mm, s.frame_id)
                                          for s in frames])
    assert a.local2d.features.data.tobytes() == b.local2d.features.data.tobytes()
    assert a.joint.C.data.tobytes() == b.joint.C.data.tobytes()


def test_encode_3d_needs_two_points():
    cfg = tiny_cfg()
    with pytest.raises(ValueError):
        cnd.encode_3d(params_for(cfg), cfg, [PointCloud(np.zeros((1, 3)), np.zeros(3), 1.0)])


def _global3d(cfg, ps, pts):
    return cnd.encode_3d(ps, cfg, [PointCloud(pts, np.zeros(3), 1.0)])


def test_encode_3d_permutation_invariant(rng):
    cfg = tiny_cfg(n_points=64, sa_k=6)
    ps = params_for(cfg)
    pts = normalize(rng.normal(size=(64, 3))).points
    l3, g = _global3d(cfg, ps, pts)
    for _ in range(5):
        p = rng.permutation(64)
        l3p, gp = _global3d(cfg, ps, pts[p])
        assert np.abs(gp.data - g.data).max() < 1e-9
        # same carriers and same feature rows, possibly reordered
        order = np.lexsort(l3.carriers[0].T)
        order_p = np.lexsort(l3p.carriers[0].T)
        assert np.array_equal(l3.carriers[0][order], l3p.carriers[0][order_p])
        assert np.abs(l3.features.data[0][order] - l3p.features.data[0][order_p]).max() < 1e-9


def test_encode_3d_duplicated_then_resampled(rng):
    # every point duplicated, then N points drawn back with one copy of each
    cfg = tiny_cfg(n_points=48, sa_k=5)
    ps = params_for(cfg)
    pts = normalize(rng.normal(size=(48, 3))).points
    doubled = np.concatenate([pts, pts])
    pick = np.arange(48) + 48 * rng.integers(0, 2, 48)
    resampled = doubled[rng.permutation(pick)]
    _, g = _global3d(cfg, ps, pts)
    _, g2 = _global3d(cfg, ps, resampled)
    assert np.abs(g.data - g2.data).max() < 1e-9


def test_degenerate_blob_is_finite(rng):
    cfg = tiny_cfg()
    ps = params_for(cfg)
    pts = np.zeros((32, 3))
    pts[0] = [1.0, 0, 0]  # one point away from a collapsed blob
    l3, g = _global3d(cfg, ps, pts)
    assert np.isfinite(l3.features.data).all() and np.isfinite(g.data).all()


def test_fps_seed_is_order_independent(rng):
    pts = rng.normal(size=(20, 3))
    p = rng.permutation(20)
    assert np.array_equal(pts[cnd.fps_seed(pts)], pts[p][cnd.fps_seed(pts[p])])


# ------------------------------------------------------------------ joint-wise conditions


def test_bil_zero_weights_leave_bias_path(rng):
    cfg = tiny_cfg()
    ps = params_for(cfg)
    for name in ("bil.w1", "bil.w2", "bil.w3"):
        ps[name].data[:] = 0.0
    g2, g3 = ad.Tensor(rng.normal(size=(2, cfg.d2d))), ad.Tensor(rng.normal(size=(2, cfg.d3d)))
    C = cnd.extract_joint_conditions(ps, cfg, g2, g3).C.data
    np.testing.assert_array_equal(C[0], ps["bil.b3"].data)
    np.testing.assert_array_equal(C[0], C[1])
    assert all(np.abs(C[0, i] - C[0, j]).max() > 0 for i in range(4) for j in range(i))


def test_bil_rows_distinct_at_init(rng):
    cfg = tiny_cfg(joints=21, dc=16)
    ps = params_for(cfg)
    g = ad.Tensor(rng.normal(size=(1, cfg.d2d)))
    C = cnd.extract_joint_conditions(ps, cfg, g, ad.Tensor(rng.normal(size=(1, cfg.d3d)))).C.data[0]
    d = np.sqrt(((C[:, None] - C[None]) ** 2).sum(-1))
    assert d[~np.eye(21, dtype=bool)].min() > 0


def test_joint_conditions_identical_globals(rng):
    cfg = tiny_cfg()
    ps = params_for(cfg)
    g2 = np.repeat(rng.normal(size=(1, cfg.d2d)), 2, axis=0)
    g3 = np.repeat(rng.normal(size=(1, cfg.d3d)), 2, axis=0)
    out = cnd.extract_joint_conditions(ps, cfg, ad.Tensor(g2), ad.Tensor(g3))
    assert np.array_equal(out.C.data[0], out.C.data[1])
    assert np.array_equal(out.Jc.data[0], out.Jc.data[1])


def test_joint_conditions_reference(rng):
    cfg = tiny_cfg()
    ps = params_for(cfg)
    g2, g3 = rng.normal(size=(2, cfg.d2d)), rng.normal(size=(2, cfg.d3d))
    out = cnd.extract_joint_conditions(ps, cfg, ad.Tensor(g2), ad.Tensor(g3))
    p = {k: v.data for k, v in ps.items()}
    for b in range(2):
        g = np.concatenate([g2[b], g3[b]])
        for j in range(cfg.joints):
            h = np.maximum(g @ p["bil.w1"] + p["bil.b1"][j], 0)
            h = np.maximum(h @ p["bil.w2"] + p["bil.b2"][j], 0)
            h = h @ p["bil.w3"] + p["bil.b3"][j]
            assert np.abs(out.C.data[b, j] - h).max() < 1e-12
            assert np.abs(out.Jc.data[b, j] - (h @ p["jc.w"] + p["jc.b"])).max() < 1e-12


def test_joint_count_rejected(rng):
    cfg = tiny_cfg()
    ps = params_for(cfg)
    g = ad.Tensor(np.zeros((1, cfg.d2d)))
    with pytest.raises(ValueError):
        cnd.extract_joint_conditions(ps, cfg, g, ad.Tensor(np.zeros((1, cfg.d3d))), n_joints=0)


def test_without_joint_conditions_rows_are_shared(rng):
    cfg = tiny_cfg(use_jc=False, use_kc=False)
    ps = params_for(cfg)
    out = cnd.extract_joint_conditions(ps, cfg, ad.Tensor(rng.normal(size=(1, cfg.d2d))),
                                       ad.Tensor(rng.normal(size=(1, cfg.d3d))))
    assert out.Jc is None
    assert all(np.array_equal(out.C.data[0, 0], out.C.data[0, j]) for j in range(cfg.joints))


def test_encoder_gradients(frames):
    cfg = tiny_cfg()
    ps = params_for(cfg, seed=3)
    rng = np.random.default_rng(0)
    target = rng.normal(size=(len(frames), cfg.joints, cfg.dc))
    names = ["enc2d.conv1.w", "enc2d.dec.b", "enc3d.sa1.w1", "enc3d.sa2.w2", "bil.b1", "bil.w3", "jc.w"]

    def build():
        cond = cnd.encode(ps, cfg, frames)
        diff = ad.sub(cond.joint.C, ad.Tensor(target))
        return ad.add(ad.sum_all(ad.mul(diff, diff)), ad.sum_all(ad.mul(cond.joint.Jc, cond.joint.Jc)))

    assert check_grads(build, [ps[n] for n in names]) < 1e-4
