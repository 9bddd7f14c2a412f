import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointvt import autodiff as ad
from jointvt.autodiff import Tensor
from jointvt.autodiff.check import gradcheck

rng = np.random.default_rng(0)


def away_from_zero(shape):
    x = rng.uniform(0.2, 1.5, shape)
    return x * rng.choice([-1, 1], shape)


def rand(*shape):
    return rng.standard_normal(shape)


def pos(*shape):
    return rng.uniform(0.5, 2.0, shape)


UNARY = {
    "neg": (ad.neg, rand(3, 4)),
    "exp": (ad.exp, rand(2, 3, 2)),
    "log": (ad.log, pos(3, 4)),
    "tanh": (ad.tanh, rand(4, 3)),
    "sigmoid": (ad.sigmoid, rand(2, 5)),
    "relu": (ad.relu, away_from_zero((3, 4))),
    "leaky_relu": (ad.leaky_relu, away_from_zero((3, 4))),
    "square": (ad.square, rand(3, 2)),
    "sum": (lambda a: ad.tsum(a, axis=1), rand(3, 4, 2)),
    "sum_all": (ad.tsum, rand(2, 3)),
    "mean": (lambda a: ad.mean(a, axis=(0, 2), keepdims=True), rand(3, 4, 2)),
    "reshape": (lambda a: ad.reshape(a, (6, 2)), rand(3, 4)),
    "transpose": (lambda a: ad.transpose(a, (2, 0, 1)), rand(2, 3, 4)),
    "swapaxes": (lambda a: ad.swapaxes(a, 0, 2), rand(2, 3, 4)),
    "getitem": (lambda a: a[1:, ::2], rand(3, 4)),
    "softmax": (lambda a: ad.softmax(a, axis=1), rand(3, 5)),
    "slogdet": (ad.slogdet, rand(4, 4) + 3 * np.eye(4)),
    "inv": (ad.inv, rand(3, 3) + 3 * np.eye(3)),
}

BINARY = {
    "add": (ad.add, rand(3, 4), rand(3, 4)),
    "add_bcast": (ad.add, rand(3, 4), rand(4)),
    "sub": (ad.sub, rand(2, 3), rand(2, 3)),
    "mul": (ad.mul, rand(2, 3, 2), rand(1, 3, 1)),
    "div": (ad.div, rand(3, 4), pos(3, 4)),
    "matmul": (ad.matmul, rand(3, 4), rand(4, 2)),
    "matmul_batched": (ad.matmul, rand(2, 3, 4), rand(4, 5)),
    "mse": (ad.mse, rand(3, 4), rand(3, 4)),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), rand(2, 3), rand(2, 2)),
    "conv2d": (lambda x, w: ad.conv2d(x, w, 1, 1), rand(2, 2, 5, 5), rand(3, 2, 3, 3)),
    "conv2d_stride": (lambda x, w: ad.conv2d(x, w, 2, 1), rand(1, 2, 6, 5), rand(2, 2, 3, 3)),
    "conv_transpose2d": (lambda x, w: ad.conv_transpose2d(x, w, 2, 1), rand(2, 2, 3, 3),
                         rand(2, 3, 4, 4)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    fn, x = UNARY[name]
    assert gradcheck(fn, [x]) < 1e-4


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients(name):
    fn, a, b = BINARY[name]
    assert gradcheck(fn, [a, b]) < 1e-4


@pytest.mark.parametrize("shape", [(6, 3), (4, 2, 3, 3)])
def test_batch_norm_gradient(shape):
    c = shape[1]
    fn = lambda x, g, b: ad.batch_norm(x, g, b)[0]
    assert gradcheck(fn, [rand(*shape), pos(c), rand(c)]) < 1e-4


def test_composite_gradient():
    def fn(x, w):
        h = ad.tanh(x @ w)
        return ad.softmax(h * h, axis=-1).sum(axis=0)
    assert gradcheck(fn, [rand(4, 3), rand(3, 5)]) < 1e-4


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    (x * x + x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.exp(x)
    assert y._backward is None and not y.requires_grad


def test_broadcast_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.ones((3, 4))), Tensor(np.ones(3)))
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((3, 4))))
    with pytest.raises(ad.ShapeError):
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv_identity_kernel():
    x = rand(2, 3, 5, 4)
    w = np.eye(3)[:, :, None, None]
    np.testing.assert_allclose(ad.conv2d(Tensor(x), Tensor(w)).data, x.astype(np.float32))


def test_conv_transpose_is_adjoint():
    x, y = rand(1, 2, 6, 6), rand(1, 3, 3, 3)
    w = rand(3, 2, 4, 4)
    with ad.precision(np.float64):
        cx = ad.conv2d(Tensor(x), Tensor(w), 2, 1).data
        ty = ad.conv_transpose2d(Tensor(y), Tensor(w), 2, 1).data
    assert (cx * y).sum() == pytest.approx((x * ty).sum(), rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(2, 8), st.integers(0, 10_000))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).standard_normal((rows, cols)) * 10
    s = ad.softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


def test_mse_closed_forms():
    x = Tensor(np.zeros((2, 5)))
    assert ad.mse(x, x).item() == 0.0
    assert ad.mse(Tensor(np.ones((2, 5))), x).item() == 1.0


def test_mse_gradient_wrt_target():
    a = rand(3, 4)
    assert gradcheck(lambda b: ad.mse(Tensor(a), b), [rand(3, 4)], h=1e-6) < 1e-6


# optimizer

def test_adam_zero_gradient_is_noop():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = ad.Adam([p], lr=0.1)
    before = p.data.copy()
    ad.adam_step([p], [np.zeros(2)], opt)
    np.testing.assert_array_equal(p.data, before)


@given(st.lists(st.floats(-100, 100).filter(lambda g: abs(g) > 1e-3), min_size=1, max_size=8))
def test_adam_first_step_is_lr_sign(g):
    with ad.precision(np.float64):
        p = Tensor(np.zeros(len(g)), requires_grad=True)
    opt = ad.Adam([p], lr=0.01)
    ad.adam_step([p], [np.array(g)], opt)
    np.testing.assert_allclose(p.data, -0.01 * np.sign(g), atol=1e-6)


def test_adam_lr_scale_per_parameter():
    with ad.precision(np.float64):
        a = Tensor(np.zeros(2), requires_grad=True)
        b = Tensor(np.zeros(2), requires_grad=True)
    opt = ad.Adam([a, b], lr=0.01, lr_scale=[1.0, 10.0])
    ad.adam_step([a, b], [np.ones(2), np.ones(2)], opt)
    np.testing.assert_allclose(a.data, -0.01, atol=1e-7)
    np.testing.assert_allclose(b.data, -0.1, atol=1e-6)
    with pytest.raises(ValueError):
        ad.Adam([a, b], lr_scale=[1.0])


def test_adam_minimises_square():
    with ad.precision(np.float64):
        w = Tensor(np.array([1.0]), requires_grad=True)
    opt = ad.Adam([w], lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        (w * w).sum().backward()
        opt.step()
    assert abs(w.item()) < 0.1


def test_adam_rejects_nan_gradient():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(FloatingPointError):
        ad.adam_step([p], [np.array([np.nan, 0.0])], ad.Adam([p]))


# layers

def test_batchnorm_train_statistics():
    bn = ad.BatchNorm(3)
    with ad.precision(np.float64):
        x = Tensor(rng.standard_normal((16, 3, 4, 4)) * 3 + 2)
    y = bn(x).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-5)


def test_batchnorm_eval_identity():
    bn = ad.BatchNorm(4).eval()
    x = rand(5, 4).astype(np.float32)
    np.testing.assert_allclose(bn(Tensor(x)).data, x / np.sqrt(1 + 1e-5), rtol=1e-6)


def test_batchnorm_train_needs_two():
    with pytest.raises(ValueError):
        ad.BatchNorm(2)(Tensor(np.ones((1, 2))))


# checkpoints

def test_checkpoint_round_trip(tmp_path):
    r = np.random.default_rng(1)
    net = ad.Linear(4, 3, r)
    bn = ad.BatchNorm(3)
    bn(Tensor(r.standard_normal((5, 3))))
    arrays = {**ad.module_arrays(net, "lin."), **ad.module_arrays(bn, "bn.")}
    ad.save_arrays(tmp_path / "ck", arrays, {"note": "x"})
    back, manifest = ad.load_arrays(tmp_path / "ck")
    assert manifest["note"] == "x"
    net2, bn2 = ad.Linear(4, 3, np.random.default_rng(9)), ad.BatchNorm(3)
    ad.load_module_arrays(net2, back, "lin.")
    ad.load_module_arrays(bn2, back, "bn.")
    np.testing.assert_array_equal(net2.weight.data, net.weight.data)
    np.testing.assert_array_equal(bn2.running_var, bn.running_var)


def test_checkpoint_shape_mismatch(tmp_path):
    ad.save_arrays(tmp_path / "ck", ad.module_arrays(ad.Linear(4, 3, rng)))
    arrays, _ = ad.load_arrays(tmp_path / "ck")
    with pytest.raises(ValueError):
        ad.load_module_arrays(ad.Linear(5, 3, rng), arrays)
