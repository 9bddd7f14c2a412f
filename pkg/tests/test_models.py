import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from jointvt import autodiff as ad
from jointvt.autodiff import Tensor
from jointvt.autodiff.check import gradcheck
from jointvt.models import (Autoencoder, AutoencoderConfig, LatentCode, PartitionSpec,
                            SelfAttention, attention_map, recon_loss)


def loops_attention(x, w_f, w_g):
    """beta[j, i] by explicit loops over positions."""
    c, n = x.shape
    f = [w_f @ x[:, i] for i in range(n)]
    g = [w_g @ x[:, j] for j in range(n)]
    beta = np.zeros((n, n))
    for j in range(n):
        s = np.array([g[j] @ f[i] for i in range(n)])
        e = np.exp(s - s.max())
        beta[j] = e / e.sum()
    return beta


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(2, 12))
def test_attention_rows_sum_to_one(seed, c, n):
    r = np.random.default_rng(seed)
    beta = attention_map(r.standard_normal((2, c, n)), r.standard_normal((c, c)),
                         r.standard_normal((c, c))).data
    np.testing.assert_allclose(beta.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_zero_projections_uniform():
    x = np.random.default_rng(0).standard_normal((4, 9))
    beta = attention_map(x, np.zeros((4, 4)), np.zeros((4, 4))).data
    np.testing.assert_allclose(beta, 1 / 9, atol=1e-7)


def test_attention_matches_loops():
    r = np.random.default_rng(1)
    x, wf, wg = r.standard_normal((4, 9)), r.standard_normal((4, 4)), r.standard_normal((4, 4))
    with ad.precision(np.float64):
        got = attention_map(x, wf, wg).data
    np.testing.assert_allclose(got, loops_attention(x, wf, wg), atol=1e-6)


def test_eta_zero_is_identity():
    block = SelfAttention(8, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).standard_normal((2, 8, 4, 4)))
    np.testing.assert_array_equal(block(x).data, x.data)


def test_uniform_attention_averages():
    c, n = 3, 6
    block = SelfAttention(c, np.random.default_rng(0))
    with ad.precision(np.float64):
        block.w_f = Tensor(np.zeros((c, c)), requires_grad=True)
        block.w_g = Tensor(np.zeros((c, c)), requires_grad=True)
        block.w_h = Tensor(np.eye(c), requires_grad=True)
        block.w_v = Tensor(np.eye(c), requires_grad=True)
        block.eta = Tensor(np.ones(1), requires_grad=True)
        x = np.random.default_rng(2).standard_normal((1, c, n))
        y = block.forward_flat(Tensor(x)).data
    np.testing.assert_allclose(y - x, np.broadcast_to(x.mean(axis=-1, keepdims=True), x.shape),
                               atol=1e-12)


def test_attention_block_gradcheck():
    r = np.random.default_rng(3)
    c, n = 3, 5

    def fn(x, wf, wg, wh, wv, eta):
        block = SelfAttention(c, r)
        block.w_f, block.w_g, block.w_h, block.w_v, block.eta = wf, wg, wh, wv, eta
        return block.forward_flat(x)

    args = [r.standard_normal((2, c, n))] + [r.standard_normal((c, c)) * 0.5 for _ in range(4)]
    assert gradcheck(fn, args + [np.array([0.7])]) < 1e-4


def test_attention_channel_check():
    with pytest.raises(ad.ShapeError):
        SelfAttention(4, np.random.default_rng(0)).forward_flat(Tensor(np.ones((1, 3, 5))))


SMALL = AutoencoderConfig(in_channels=1, height=16, width=12, channels=(4, 8, 8),
                          attention_stage=2, latent_dim=6)


@pytest.mark.parametrize("cfg", [SMALL, AutoencoderConfig(),
                                 AutoencoderConfig(in_channels=3, height=90, width=98)])
def test_autoencoder_shape_round_trip(cfg):
    ae = Autoencoder(cfg, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).uniform(size=(2, cfg.in_channels, cfg.height, cfg.width)))
    z = ae.encode(x)
    assert z.shape == (2, cfg.latent_dim)
    y = ae.decode(z)
    assert y.shape == x.shape
    assert 0 < y.data.min() and y.data.max() < 1


def test_zero_eta_matches_attention_free_net():
    a = Autoencoder(SMALL, np.random.default_rng(0), use_attention=True)
    b = Autoencoder(SMALL, np.random.default_rng(0), use_attention=False)
    # copy weights shared by both
    pa, pb = dict(a.named_parameters()), dict(b.named_parameters())
    for k, v in pb.items():
        v.data = pa[k].data.copy()
    x = Tensor(np.random.default_rng(4).uniform(size=(3, 1, 16, 12)))
    np.testing.assert_array_equal(a(x).data, b(x).data)


def test_encoder_rejects_wrong_shape():
    ae = Autoencoder(SMALL, np.random.default_rng(0))
    with pytest.raises(ad.ShapeError):
        ae.encode(Tensor(np.ones((2, 1, 16, 16))))
    with pytest.raises(ad.ShapeError):
        ae.decode(Tensor(np.ones((2, 5))))


def test_autoencoder_gradcheck_small():
    cfg = AutoencoderConfig(in_channels=1, height=6, width=6, channels=(2, 2),
                            attention_stage=1, latent_dim=3)
    r = np.random.default_rng(5)
    with ad.precision(np.float64):
        ae = Autoencoder(cfg, r)
        ae.encoder.attn.eta.data[:] = 0.5
        ae.decoder.attn.eta.data[:] = -0.5
        x = r.uniform(size=(3, 1, 6, 6))
        assert gradcheck(ae, [x]) < 1e-4
        # parameter gradients against central differences
        w = r.standard_normal(x.shape)
        ae.zero_grad()
        (ae(Tensor(x)) * Tensor(w)).sum().backward()
        for name, p in ae.named_parameters():
            k = int(np.argmax(np.abs(p.grad)))
            old = p.data.flat[k]
            p.data.flat[k] = old + 1e-5
            up = (ae(Tensor(x)).data * w).sum()
            p.data.flat[k] = old - 1e-5
            down = (ae(Tensor(x)).data * w).sum()
            p.data.flat[k] = old
            num = (up - down) / 2e-5
            assert abs(num - p.grad.flat[k]) <= 1e-4 * max(1.0, abs(num)), name


def test_recon_loss_closed_forms():
    x = Tensor(np.zeros((2, 1, 4, 4)))
    assert recon_loss(x, x).item() == 0.0
    assert recon_loss(Tensor(np.ones((2, 1, 4, 4))), x).item() == 1.0


# latent partition

def test_partition_dims():
    p = PartitionSpec()
    assert (p.d_l_g, p.d_l_s) == (64, 64)
    for bad in (dict(d_shared=3), dict(d_g_only=0), dict(d_s_only=-2)):
        with pytest.raises(ValueError):
            PartitionSpec(**bad)


@given(st.integers(1, 20), st.integers(1, 20))
def test_latent_code_slices_cover(d_sh, d_only):
    code = LatentCode(np.arange(d_sh + d_only, dtype=float), d_sh)
    a, b = code.index_sets()
    assert not a & b and a | b == set(range(d_sh + d_only))
    np.testing.assert_array_equal(np.concatenate([code.shared, code.domain_only]), code.values)
