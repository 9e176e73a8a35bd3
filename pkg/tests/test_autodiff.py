import numpy as np
import pytest

from handdiff import autodiff as ad
from handdiff.optim import ParamStore, adamw_step, load_checkpoint, read_checkpoint, \
    save_checkpoint, CheckpointError

from conftest import check_grads


def leaf(rng, *shape):
    return ad.Tensor(rng.uniform(-2, 2, shape), requires_grad=True)


def test_relu_definition():
    assert ad.relu(ad.Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]


def test_max_pool_rows():
    out = ad.max_pool(ad.Tensor([[1.0, 5.0], [3.0, 2.0]]), axis=0)
    assert out.data.tolist() == [3, 5]


def test_matmul_identity(rng):
    x = rng.normal(size=(3, 4))
    assert np.array_equal(ad.matmul(ad.Tensor(np.eye(3)), ad.Tensor(x)).data, x)


def test_shape_mismatch_names_op():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(ad.Tensor(np.ones(2)), ad.Tensor(np.ones(3)))


def test_sum_of_squares_grad():
    w = ad.Tensor([1.0, 2.0], requires_grad=True)
    ad.backward(ad.sum_all(ad.mul(w, w)))
    assert w.grad.tolist() == [2.0, 4.0]


def test_dead_relu_grad():
    w = ad.Tensor([1.5], requires_grad=True)
    dead = ad.relu(ad.Tensor([-3.0]))
    ad.backward(ad.sum_all(ad.mul(dead, w)))
    assert w.grad.tolist() == [0.0]


def test_untracked_gets_no_grad():
    w = ad.Tensor([1.0, 2.0], requires_grad=True)
    c = ad.Tensor([3.0, 4.0])
    ad.backward(ad.sum_all(ad.mul(w, c)))
    assert c.grad is None
    assert w.grad.tolist() == [3.0, 4.0]


def test_backward_rejects_non_scalar():
    w = ad.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.mul(w, w))


def test_non_finite_is_an_error():
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        ad.scale(ad.Tensor([1e308]), 1e10)


def test_max_pool_ties_route_to_lowest_index():
    x = ad.Tensor([[2.0, 1.0], [2.0, 3.0], [0.0, 3.0]], requires_grad=True)
    ad.backward(ad.sum_all(ad.max_pool(x, axis=0)))
    assert x.grad.tolist() == [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(2, 9, 9, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    a = ad.conv2d(ad.Tensor(x), ad.Tensor(w), stride=2).data
    b = ad.conv2d(ad.Tensor(x.copy()), ad.Tensor(w.copy()), stride=2).data
    assert a.tobytes() == b.tobytes()


def sq(z):
    return ad.sum_all(ad.mul(z, z))


def _cases(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
    w, bias = leaf(rng, 4, 5), leaf(rng, 5)
    yield "add/sub/mul", [a, b], lambda: ad.sum_all(ad.mul(ad.sub(ad.add(a, b), b), ad.add(a, b)))
    yield "matmul+bias", [a, w, bias], lambda: sq(ad.bias_add(ad.matmul(a, w), bias))
    yield "relu", [a], lambda: ad.sum_all(ad.mul(ad.relu(a), a))
    yield "dense+relu", [a, w, bias], lambda: sq(ad.dense(a, w, bias, relu=True))
    yield "dense row-stable", [a, w], lambda: sq(ad.dense(a, w, row_stable=True))
    yield "linear 3d", [c3 := leaf(rng, 2, 3, 4), w], lambda: sq(ad.linear(c3, w, relu=True))
    c4 = leaf(rng, 2, 3, 5)
    yield "concat", [c3, c4], lambda: sq(ad.concat([c3, c4], axis=-1))
    yield "reshape", [c3], lambda: ad.sum_all(ad.mul(ad.reshape(c3, (6, 4)), ad.reshape(ad.relu(c3), (6, 4))))
    idx = rng.integers(0, 3, size=(7, 2))
    yield "gather", [a], lambda: sq(ad.gather(a, idx))
    yield "max_pool", [c3], lambda: sq(ad.max_pool(c3, axis=1))
    adj, x = leaf(rng, 3, 3, 4), leaf(rng, 2, 3, 4)
    yield "channel_graph", [adj, x], lambda: sq(ad.channel_graph(adj, x))
    bias3 = leaf(rng, 3, 4)
    yield "bias_add per-row", [x, bias3], lambda: sq(ad.bias_add(x, bias3))
    img, k, kb = leaf(rng, 2, 7, 6, 2), leaf(rng, 3, 3, 2, 3), leaf(rng, 3)
    yield "conv2d s1", [img, k, kb], lambda: sq(ad.conv2d(img, k, kb, stride=1))
    yield "conv2d s2", [img, k], lambda: sq(ad.conv2d(img, k, stride=2))
    yield "smooth_l1", [a], lambda: ad.smooth_l1(ad.scale(a, 0.02))
    yield "mean", [a], lambda: ad.mean_all(ad.mul(a, b))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitive_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, leaves, build in _cases(rng):
        err = check_grads(build, leaves)
        assert err < 1e-4, f"{name}: relative error {err:.2e}"


def test_composite_graph_gradient(rng):
    x = leaf(rng, 5, 3)
    w1, b1, w2 = leaf(rng, 3, 6), leaf(rng, 6), leaf(rng, 6, 2)

    def build():
        h = ad.relu(ad.bias_add(ad.matmul(x, w1), b1))
        pooled = ad.max_pool(ad.reshape(ad.matmul(h, w2), (5, 2)), axis=0)
        return ad.smooth_l1(ad.sub(pooled, ad.Tensor([0.3, -0.2])))

    assert check_grads(build, [x, w1, b1, w2]) < 1e-4


# ------------------------------------------------------------------- optimizer


def test_adamw_zero_grad_no_decay_is_noop():
    store = ParamStore()
    store.add("w", [1.0, -2.0])
    adamw_step(store, {"w": np.zeros(2)}, lr=0.1, weight_decay=0.0)
    assert store["w"].data.tolist() == [1.0, -2.0]
    assert store.step == 1


def test_adamw_default_settings():
    import inspect
    sig = inspect.signature(adamw_step)
    assert sig.parameters["lr"].default == 0.001
    assert sig.parameters["beta1"].default == 0.5
    assert sig.parameters["beta2"].default == 0.999


def test_adamw_single_step_on_square():
    # hand computation: g = 2, m_hat = 2, v_hat = 4, update = lr * 2 / (2 + eps)
    store = ParamStore()
    w = store.add("w", [1.0])
    adamw_step(store, {"w": np.array([2.0])}, lr=0.1, weight_decay=0.0)
    assert abs(w.data[0]) < 1
    assert w.data[0] == pytest.approx(0.9, abs=1e-7)


def test_adamw_rejects_bad_lr():
    store = ParamStore()
    store.add("w", [1.0])
    with pytest.raises(ValueError):
        adamw_step(store, {"w": np.ones(1)}, lr=0.0)


def test_checkpoint_round_trip(tmp_path, rng):
    store = ParamStore()
    store.add("enc.w", rng.normal(size=(3, 4)))
    store.add("bias", rng.normal(size=(5,)))
    store.add("scalar", 2.5)
    path = tmp_path / "p.ckpt"
    save_checkpoint(store, path)
    raw = path.read_bytes()
    assert raw[:8] == b"HDIFFCKP"
    other = ParamStore()
    other.add("enc.w", np.zeros((3, 4)))
    other.add("bias", np.zeros(5))
    other.add("scalar", 0.0)
    load_checkpoint(other, path)
    for k in store:
        assert np.array_equal(store[k].data, other[k].data)
    assert list(read_checkpoint(path)) == ["enc.w", "bias", "scalar"]


def test_checkpoint_truncated(tmp_path):
    store = ParamStore()
    store.add("w", np.ones(4))
    path = tmp_path / "p.ckpt"
    save_checkpoint(store, path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(path)


def test_dense_matches_unfused(rng):
    x, w, b = rng.normal(size=(6, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
    fused = ad.dense(x, w, b, relu=True).data
    np.testing.assert_allclose(fused, np.maximum(x @ w + b, 0), atol=1e-14)
    np.testing.assert_allclose(ad.dense(x, w, row_stable=True).data, x @ w, atol=1e-13)
    with pytest.raises(ad.ShapeError):
        ad.dense(x, w, np.ones(4))


def test_max_pool_backends_agree(rng):
    from handdiff import _pykernels, kernels
    x = np.round(rng.normal(size=(5, 7, 3)), 1)  # coarse values force ties
    out_py, arg_py = kernels.max_pool_mid(x, impl=_pykernels)
    out, arg = kernels.max_pool_mid(x)
    assert np.array_equal(out, out_py) and np.array_equal(arg, arg_py)
    assert np.array_equal(out, x.max(axis=1)) and np.array_equal(arg, x.argmax(axis=1))
    g = rng.normal(size=(5, 3))
    assert np.array_equal(kernels.max_pool_mid_backward(g, arg, 7),
                          kernels.max_pool_mid_backward(g, arg, 7, impl=_pykernels))
