"""Self-attention convolutional autoencoders for geometry images and mel images."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNorm, Conv2d, ConvTranspose2d, Linear, Module, Tensor


def attention_map(x, w_f, w_g):
    """beta[j, i]: softmax over i of f(x_i) . g(x_j), for x of shape (..., C, N)."""
    x, w_f, w_g = (ad.tensor.as_tensor(t) for t in (x, w_f, w_g))
    f = w_f @ x
    g = w_g @ x
    logits = ad.swapaxes(g, -1, -2) @ f
    return ad.softmax(logits, axis=-1)


class SelfAttention(Module):
    """Non-local block: ``y_j = eta * v(sum_i beta[j, i] h(x_i)) + x_j``.

    All four projections are C x C 1x1 convolutions (written as matrices);
    ``reduction`` > 1 shrinks the f/g projections to C // reduction rows.
    """

    def __init__(self, channels, rng, reduction=1):
        inner = max(1, channels // reduction)
        self.channels = channels
        self.w_f = ad.nn.kaiming_uniform(rng, (inner, channels), channels)
        self.w_g = ad.nn.kaiming_uniform(rng, (inner, channels), channels)
        self.w_h = ad.nn.kaiming_uniform(rng, (channels, channels), channels)
        self.w_v = ad.nn.kaiming_uniform(rng, (channels, channels), channels)
        self.eta = ad.nn.zeros_param((1,))

    def attention(self, x):
        return attention_map(x, self.w_f, self.w_g)

    def forward_flat(self, x):
        """x: (B, C, N) -> (B, C, N)."""
        if x.shape[-2] != self.channels:
            raise ad.ShapeError(f"self-attention expects {self.channels} channels, got {x.shape}")
        beta = self.attention(x)
        pooled = (self.w_h @ x) @ ad.swapaxes(beta, -1, -2)
        o = self.w_v @ pooled
        return self.eta * o + x

    def forward(self, x):
        b, c, h, w = x.shape
        return self.forward_flat(x.reshape(b, c, h * w)).reshape(b, c, h, w)


def _down(n):
    # stride-2, kernel-3, pad-1 convolution output size
    return (n - 1) // 2 + 1


@dataclass
class AutoencoderConfig:
    in_channels: int = 1
    height: int = 32
    width: int = 32
    channels: tuple = (16, 32, 64, 64)
    attention_stage: int = 3  # insert after this encoder stage (1-based); 0 disables
    attention_reduction: int = 1
    latent_dim: int = 64

    def spatial_sizes(self):
        hs, ws = [self.height], [self.width]
        for _ in self.channels:
            hs.append(_down(hs[-1]))
            ws.append(_down(ws[-1]))
        return hs, ws

    def to_dict(self):
        return {"in_channels": self.in_channels, "height": self.height, "width": self.width,
                "channels": list(self.channels), "attention_stage": self.attention_stage,
                "attention_reduction": self.attention_reduction, "latent_dim": self.latent_dim}


class Encoder(Module):
    def __init__(self, cfg: AutoencoderConfig, rng, use_attention=True):
        self.cfg = cfg
        self.convs, self.norms = [], []
        c_in = cfg.in_channels
        for c in cfg.channels:
            self.convs.append(Conv2d(c_in, c, 3, rng, stride=2, pad=1))
            self.norms.append(BatchNorm(c))
            c_in = c
        self.attn = None
        if use_attention and cfg.attention_stage:
            self.attn = SelfAttention(cfg.channels[cfg.attention_stage - 1], rng,
                                      cfg.attention_reduction)
        hs, ws = cfg.spatial_sizes()
        self.flat = c_in * hs[-1] * ws[-1]
        self.fc = Linear(self.flat, cfg.latent_dim, rng)
        # fixes the latent scale so mapping and prior losses cannot shrink it away
        self.latent_norm = BatchNorm(cfg.latent_dim, affine=False)

    def forward(self, x):
        cfg = self.cfg
        expected = (cfg.in_channels, cfg.height, cfg.width)
        if tuple(x.shape[1:]) != expected:
            raise ad.ShapeError(f"encoder expects input (B, {expected}), got {x.shape}")
        for k, (conv, norm) in enumerate(zip(self.convs, self.norms), start=1):
            x = ad.leaky_relu(norm(conv(x)), 0.2)
            if self.attn is not None and k == cfg.attention_stage:
                x = self.attn(x)
        x = x.reshape(x.shape[0], self.flat)
        return self.latent_norm(self.fc(x))


class Decoder(Module):
    def __init__(self, cfg: AutoencoderConfig, rng, use_attention=True):
        self.cfg = cfg
        hs, ws = cfg.spatial_sizes()
        self.sizes = list(zip(hs[::-1], ws[::-1]))  # bottleneck first
        chans = list(cfg.channels[::-1]) + [cfg.in_channels]
        self.fc = Linear(cfg.latent_dim, chans[0] * hs[-1] * ws[-1], rng)
        self.fc_norm = BatchNorm(chans[0] * hs[-1] * ws[-1])
        self.deconvs, self.norms = [], []
        for k in range(len(cfg.channels)):
            self.deconvs.append(ConvTranspose2d(chans[k], chans[k + 1], 4, rng, stride=2, pad=1))
            if k < len(cfg.channels) - 1:
                self.norms.append(BatchNorm(chans[k + 1]))
        n = len(cfg.channels)
        self.attn_after = n - cfg.attention_stage if cfg.attention_stage else None
        self.attn = None
        if use_attention and cfg.attention_stage:
            self.attn = SelfAttention(chans[self.attn_after], rng, cfg.attention_reduction)

    def forward(self, z):
        if z.ndim != 2 or z.shape[1] != self.cfg.latent_dim:
            raise ad.ShapeError(f"decoder expects (B, {self.cfg.latent_dim}), got {z.shape}")
        h0, w0 = self.sizes[0]
        x = ad.leaky_relu(self.fc_norm(self.fc(z)), 0.2)
        x = x.reshape(z.shape[0], -1, h0, w0)
        n = len(self.deconvs)
        for k, deconv in enumerate(self.deconvs):
            x = deconv(x)
            h, w = self.sizes[k + 1]
            if x.shape[2] != h or x.shape[3] != w:
                x = x[:, :, :h, :w]
            if k < n - 1:
                x = ad.leaky_relu(self.norms[k](x), 0.2)
            if self.attn is not None and k + 1 == self.attn_after:
                x = self.attn(x)
        return ad.sigmoid(x)


class Autoencoder(Module):
    def __init__(self, cfg: AutoencoderConfig, rng, use_attention=True):
        self.cfg = cfg
        self.encoder = Encoder(cfg, rng, use_attention)
        self.decoder = Decoder(cfg, rng, use_attention)

    def encode(self, x):
        return self.encoder(x)

    def decode(self, z):
        return self.decoder(z)

    def forward(self, x):
        return self.decode(self.encode(x))


def recon_loss(x, x_rec):
    """Per-element mean squared reconstruction error."""
    return ad.mse(x, x_rec)


@dataclass
class PartitionSpec:
    d_shared: int = 32
    d_g_only: int = 32
    d_s_only: int = 32

    def __post_init__(self):
        for name in ("d_shared", "d_g_only", "d_s_only"):
            v = getattr(self, name)
            if v < 2 or v % 2:
                raise ValueError(f"{name} must be a positive even number, got {v}")

    @property
    def d_l_g(self):
        return self.d_shared + self.d_g_only

    @property
    def d_l_s(self):
        return self.d_shared + self.d_s_only


@dataclass
class LatentCode:
    """One latent vector with the shared slice first, domain-only slice after."""

    values: np.ndarray
    d_shared: int
    domain: str = "g"
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if not 0 < self.d_shared < self.values.shape[-1]:
            raise ValueError("shared slice must be a proper, non-empty prefix of the code")

    @property
    def shared(self):
        return self.values[..., :self.d_shared]

    @property
    def domain_only(self):
        return self.values[..., self.d_shared:]

    def index_sets(self):
        d = self.values.shape[-1]
        return set(range(self.d_shared)), set(range(self.d_shared, d))
