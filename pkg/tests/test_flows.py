import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointvt import autodiff as ad
from jointvt.autodiff import Tensor
from jointvt.autodiff.check import numeric_jacobian
from jointvt.flows import (ActNorm, AffineCoupling, FlowChain, FlowNotInitialized, FlowStep,
                           Inv1x1, SingularFlowError, flow_forward, flow_inverse, log_prob,
                           sample_mode, std_normal_logpdf)


def randomize(module, rng, scale=0.1):
    """Perturb zero-initialised coupling outputs and act-norms so the flow is not the identity."""
    for m in module.modules():
        if isinstance(m, AffineCoupling):
            m.out.weight.data = (scale * rng.standard_normal(m.out.weight.shape)
                                 / np.sqrt(m.out.weight.shape[0])).astype(m.out.weight.dtype)
            m.out.bias.data = (scale * rng.standard_normal(m.out.bias.shape)).astype(m.out.bias.dtype)
        elif isinstance(m, ActNorm):
            m.set(np.exp(scale * rng.standard_normal(m.channels)),
                  scale * rng.standard_normal(m.channels))
    return module


def call(layer, x, cond=None):
    return layer(x) if cond is None else layer(x, cond)


def jacobian_logdet(layer, x, cond=None):
    """log|det J| of layer.forward at each sample of x, by central differences (float64)."""
    out = []
    for row in x:
        def f(v):
            c = None if cond is None else Tensor(cond[:1])
            return call(layer, Tensor(v[None]), c)[0].data[0]
        out.append(np.linalg.slogdet(numeric_jacobian(f, row))[1])
    return np.array(out)


# round trips

@settings(max_examples=100, deadline=None)
@given(st.sampled_from([1, 4, 8]), st.sampled_from([4, 8, 32]), st.integers(0, 2**31 - 1))
def test_chain_round_trip(k, dim, seed):
    rng = np.random.default_rng(seed)
    chain = randomize(FlowChain(dim, k, rng, hidden=32), rng)
    z = Tensor(rng.standard_normal((16, dim)))
    y, _ = flow_forward(z, chain)
    assert np.abs(flow_inverse(y, chain).data - z.data).max() < 1e-5


def test_k8_dim32_default_round_trip():
    rng = np.random.default_rng(0)
    chain = FlowChain(32, 8, rng)
    z = Tensor(rng.standard_normal((8, 32)))
    y, _ = flow_forward(z, chain)  # data-dependent act-norm init happens here
    assert np.abs(flow_inverse(y, chain).data - z.data).max() < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_coupling_round_trip(seed):
    rng = np.random.default_rng(seed)
    c = randomize(AffineCoupling(6, rng, hidden=16, cond_dim=3), rng, 1.0)
    v, cond = Tensor(rng.standard_normal((5, 6))), Tensor(rng.standard_normal((5, 3)))
    u, ld = c(v, cond)
    back, ild = c.inverse(u, cond)
    assert np.abs(back.data - v.data).max() < 1e-6 * max(1, np.abs(v.data).max()) * 10
    np.testing.assert_allclose(ld.data, -ild.data, atol=1e-6)


# identities

def test_actnorm_identity():
    a = ActNorm(3)
    a.set(1.0, 0.0)
    x = Tensor(np.random.default_rng(0).standard_normal((4, 3)))
    y, ld = a(x)
    np.testing.assert_array_equal(y.data, x.data)
    assert np.all(ld.data == 0)


def test_actnorm_scale_two_closed_form():
    a = ActNorm(1)
    a.set(2.0, 0.0)
    _, ld = a(Tensor(np.array([[0.7]])))
    assert ld.data[0] == pytest.approx(np.log(2.0), abs=1e-7)


def test_actnorm_data_init():
    a = ActNorm(4)
    with ad.precision(np.float64):
        x = Tensor(np.random.default_rng(0).standard_normal((64, 4)) * [1, 3, 0.2, 5] + [2, -1, 0, 7])
        y, _ = a(x)
    assert np.abs(y.data.mean(axis=0)).max() < 1e-6
    assert np.abs(y.data.var(axis=0) - 1).max() < 1e-5


def test_actnorm_inverse_before_init():
    with pytest.raises(FlowNotInitialized):
        ActNorm(2).inverse(Tensor(np.ones((3, 2))))


def test_inv1x1_identity_and_rotation():
    rng = np.random.default_rng(0)
    m = Inv1x1(4, rng)
    x = Tensor(rng.standard_normal((3, 4)))
    with ad.precision(np.float64):
        _, ld = m(x)
    assert np.abs(ld.data).max() < 1e-6  # float32 rotation
    m.weight.data = np.eye(4, dtype=np.float32)
    y, ld = m(x)
    np.testing.assert_array_equal(y.data, x.data)
    assert np.all(ld.data == 0)


def test_inv1x1_singular_raises():
    m = Inv1x1(3, np.random.default_rng(0))
    m.weight.data[:] = 0
    with pytest.raises(SingularFlowError):
        m(Tensor(np.ones((2, 3))))


def test_coupling_zero_net_identity():
    c = AffineCoupling(4, np.random.default_rng(0), hidden=8)
    x = Tensor(np.random.default_rng(1).standard_normal((3, 4)))
    y, ld = c(x)
    np.testing.assert_array_equal(y.data, x.data)
    assert np.all(ld.data == 0)


@pytest.mark.parametrize("dim", [1, 3, 5])
def test_coupling_odd_round_trip(dim):
    rng = np.random.default_rng(dim)
    c = randomize(AffineCoupling(dim, rng, hidden=8, cond_dim=2), rng, 0.5)
    x = Tensor(rng.standard_normal((4, dim)))
    cond = Tensor(rng.standard_normal((4, 2)))
    y, ld = c(x, cond)
    back, ld_inv = c.inverse(y, cond)
    np.testing.assert_allclose(back.data, x.data, atol=1e-5)
    np.testing.assert_allclose(ld.data, -ld_inv.data, atol=1e-6)


def test_coupling_rejects_empty():
    with pytest.raises(ValueError):
        AffineCoupling(0, np.random.default_rng(0))


def test_identity_step():
    s = FlowStep(4, np.random.default_rng(0))
    s.actnorm.set(1.0, 0.0)
    s.mix.weight.data = np.eye(4, dtype=np.float32)
    x = Tensor(np.random.default_rng(1).standard_normal((3, 4)))
    y, ld = s(x)
    np.testing.assert_array_equal(y.data, x.data)
    assert np.all(ld.data == 0)


# log-determinants against numerical Jacobians

@pytest.mark.parametrize("dim", [1, 2, 3, 4, 6, 8])
def test_logdet_matches_jacobian(dim):
    rng = np.random.default_rng(dim)
    with ad.precision(np.float64):
        a = ActNorm(dim)
        a.set(np.exp(rng.standard_normal(dim)), rng.standard_normal(dim))
        m = Inv1x1(dim, rng)
        m.weight.data = rng.standard_normal((dim, dim))
        c = randomize(AffineCoupling(dim, rng, hidden=16, cond_dim=2), rng, 1.0)
        chain = randomize(FlowChain(dim, 3, rng, hidden=16), rng, 0.5)
        x = rng.standard_normal((3, dim))
        cond = rng.standard_normal((3, 2))
        for layer, cnd in ((a, None), (m, None), (c, cond), (chain, None)):
            for i in range(len(x)):
                c_i = None if cnd is None else cnd[i:i + 1]
                ld = call(layer, Tensor(x[i:i + 1]), None if c_i is None else Tensor(c_i))[1].data[0]
                want = jacobian_logdet(layer, x[i:i + 1], c_i)[0]
                assert abs(ld - want) < 1e-4, type(layer).__name__


def test_inv1x1_random_4x4_logdet():
    rng = np.random.default_rng(7)
    with ad.precision(np.float64):
        m = Inv1x1(4, rng)
        m.weight.data = rng.standard_normal((4, 4))
        x = rng.standard_normal((1, 4))
        assert abs(m(Tensor(x))[1].data[0] - jacobian_logdet(m, x)[0]) < 1e-5


def test_chain_logdet_is_step_sum():
    rng = np.random.default_rng(0)
    chain = randomize(FlowChain(4, 5, rng, hidden=8), rng)
    _, total, steps = chain.forward(Tensor(rng.standard_normal((3, 4))), return_steps=True)
    acc = np.zeros(3, dtype=np.float32)
    for s in steps:
        acc = acc + s.data
    np.testing.assert_array_equal(total.data, acc)


# densities

def test_log_prob_identity_origin():
    chain = FlowChain(6, 1, np.random.default_rng(0))
    step = chain.steps[0]
    step.actnorm.set(1.0, 0.0)
    step.mix.weight.data = np.eye(6, dtype=np.float32)
    lp = log_prob(Tensor(np.zeros((1, 6))), chain)
    assert lp.data[0] == pytest.approx(-3 * np.log(2 * np.pi), rel=1e-6)


@pytest.mark.parametrize("direction", ["generative", "normalizing"])
def test_density_integrates_to_one(direction):
    rng = np.random.default_rng(0)
    with ad.precision(np.float64):
        chain = randomize(FlowChain(2, 4, rng, hidden=16, direction=direction), rng, 0.2)
        g = np.arange(-6, 6 + 1e-9, 0.05)
        xx, yy = np.meshgrid(g, g)
        pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
        with ad.no_grad():
            p = np.exp(log_prob(Tensor(pts), chain).data)
    mass = p.sum() * 0.05 ** 2
    assert 0.98 <= mass <= 1.02


@pytest.mark.parametrize("direction", ["generative", "normalizing"])
def test_density_1d_integrates_to_one(direction):
    rng = np.random.default_rng(0)
    with ad.precision(np.float64):
        chain = randomize(FlowChain(1, 4, rng, hidden=16, direction=direction), rng, 0.2)
        g = np.arange(-8, 8 + 1e-9, 0.01)
        with ad.no_grad():
            p = np.exp(log_prob(Tensor(g[:, None]), chain).data)
    assert 0.98 <= p.sum() * 0.01 <= 1.02


def test_actnorm_only_density_closed_form():
    chain = FlowChain(2, 1, np.random.default_rng(0), direction="generative")
    step = chain.steps[0]
    b = 0.3
    with ad.precision(np.float64):
        step.actnorm.log_scale = Tensor(np.log([2.0, 2.0]), requires_grad=True)
        step.actnorm.bias = Tensor(np.array([b, b]), requires_grad=True)
        step.actnorm.initialized[0] = 1
        step.mix.weight = Tensor(np.eye(2), requires_grad=True)
        x = np.random.default_rng(1).standard_normal((20, 2)) * 3
        lp = log_prob(Tensor(x), chain).data
    z = (x - b) / 2
    want = (-0.5 * z ** 2 - 0.5 * np.log(2 * np.pi) - np.log(2.0)).sum(axis=1)
    np.testing.assert_allclose(lp, want, atol=1e-8)


def test_std_normal_logpdf():
    z = np.random.default_rng(0).standard_normal((4, 3))
    from scipy.stats import norm
    np.testing.assert_allclose(std_normal_logpdf(Tensor(z)).data,
                               norm.logpdf(z).sum(axis=1), rtol=1e-5)


def test_sample_mode_shapes():
    rng = np.random.default_rng(0)
    chain = FlowChain(4, 2, rng, hidden=8, cond_dim=3, direction="normalizing")
    chain.initialize(Tensor(rng.standard_normal((8, 4))), Tensor(rng.standard_normal((8, 3))))
    out = sample_mode(chain, 5, Tensor(rng.standard_normal((5, 3))))
    assert out.shape == (5, 4)


def test_condition_checked():
    chain = FlowChain(4, 1, np.random.default_rng(0), hidden=8, cond_dim=3)
    with pytest.raises(ad.ShapeError):
        chain.forward(Tensor(np.ones((2, 4))), Tensor(np.ones((2, 2))))
    with pytest.raises(ad.ShapeError):
        chain.forward(Tensor(np.ones((2, 5))))
