"""Invertible flows on latent vectors: act-norm, invertible 1x1 mixing, affine coupling.

Inputs are ``(B, c)`` latent batches, or ``(B, c, *spatial)`` for which the
log-determinants are multiplied by the spatial size. A chain declares which
way its ``forward`` goes: ``"generative"`` (base -> data) or ``"normalizing"``
(data -> base); ``log_prob`` picks the sign convention from that.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Linear, Module, Tensor

LOG_2PI = float(np.log(2 * np.pi))


class FlowNotInitialized(RuntimeError):
    pass


class SingularFlowError(FloatingPointError):
    pass


def _spatial(x):
    return int(np.prod(x.shape[2:])) if x.ndim > 2 else 1


def _per_channel(v, x):
    shape = [1] * x.ndim
    shape[1] = x.shape[1]
    return v.reshape(shape)


def _batch_const(value, batch):
    """Broadcast a scalar Tensor to a per-sample (B,) log-determinant."""
    return value * Tensor(np.ones(batch))


class ActNorm(Module):
    """Per-channel affine ``y = s * z + b`` with data-dependent init.

    ``s`` is stored as ``log_scale`` so it can never reach zero.
    """

    _buffer_names = ("initialized",)

    def __init__(self, channels):
        self.channels = channels
        self.log_scale = ad.nn.zeros_param((channels,))
        self.bias = ad.nn.zeros_param((channels,))
        self.initialized = np.zeros(1, dtype=np.float32)

    @property
    def s(self):
        return np.exp(self.log_scale.data)

    @property
    def is_initialized(self):
        return bool(self.initialized[0])

    def set(self, s, b):
        s = np.broadcast_to(np.asarray(s, dtype=np.float64), (self.channels,))
        if np.any(s == 0):
            raise ValueError("act-norm scale must be nonzero")
        self.log_scale.data = np.log(np.abs(s)).astype(self.log_scale.dtype)
        self.bias.data = np.broadcast_to(b, (self.channels,)).astype(self.bias.dtype)
        self.initialized[0] = 1

    def _moments(self, x):
        axes = (0,) + tuple(range(2, x.ndim))
        data = x.data.astype(np.float64)
        return data.mean(axis=axes), data.std(axis=axes) + 1e-6

    def _check(self, x):
        if x.ndim < 2 or x.shape[1] != self.channels:
            raise ad.ShapeError(f"act-norm expects {self.channels} channels, got {x.shape}")

    def logdet(self, x):
        return _batch_const(self.log_scale.sum() * _spatial(x), x.shape[0])

    def forward(self, x):
        self._check(x)
        if not self.is_initialized:
            mu, sd = self._moments(x)
            self.set(1.0 / sd, -mu / sd)
        y = x * _per_channel(self.log_scale.exp(), x) + _per_channel(self.bias, x)
        return y, self.logdet(x)

    def inverse(self, y, init=False):
        self._check(y)
        if not self.is_initialized:
            if not init:
                raise FlowNotInitialized("act-norm inverse called before initialization")
            # normalise the inverse output instead
            mu, sd = self._moments(y)
            self.set(sd, mu)
        z = (y - _per_channel(self.bias, y)) * _per_channel((-self.log_scale).exp(), y)
        return z, -self.logdet(y)


class Inv1x1(Module):
    """Channel mixing ``y = W z`` with W initialised to a random rotation."""

    def __init__(self, channels, rng):
        q, r = np.linalg.qr(rng.standard_normal((channels, channels)))
        q = q * np.sign(np.diag(r))
        self.weight = Tensor(q, requires_grad=True)

    def _check_singular(self):
        sign, logabs = np.linalg.slogdet(self.weight.data.astype(np.float64))
        if sign == 0 or logabs < np.log(1e-12):
            raise SingularFlowError(f"1x1 mixing matrix is singular (log|det| = {logabs:.3g})")

    def _apply(self, w, x):
        if x.ndim == 2:
            return x @ ad.transpose(w)
        # move channels last, mix, move back
        b, c = x.shape[:2]
        flat = ad.swapaxes(x.reshape(b, c, -1), 1, 2)
        return ad.swapaxes(flat @ ad.transpose(w), 1, 2).reshape(x.shape)

    def logdet(self, x):
        return _batch_const(ad.slogdet(self.weight) * _spatial(x), x.shape[0])

    def forward(self, x):
        self._check_singular()
        return self._apply(self.weight, x), self.logdet(x)

    def inverse(self, y, init=False):
        self._check_singular()
        return self._apply(ad.inv(self.weight), y), -self.logdet(y)


class AffineCoupling(Module):
    """``u_a = v_a``, ``u_b = exp(log s) * v_b + t`` with ``(log s, t) = NN(v_a[, cond])``.

    ``v_a`` holds the first ``channels // 2`` entries (empty for one channel,
    when only the bias and the condition drive the transform). The network's
    last layer starts at zero so a fresh coupling is the identity. ``log s``
    is soft-clamped to (-clamp, clamp).
    """

    def __init__(self, channels, rng, hidden=128, cond_dim=0, clamp=5.0):
        if channels < 1:
            raise ValueError("affine coupling needs at least one channel")
        self.half = channels // 2
        self.n_b = channels - self.half
        self.cond_dim = cond_dim
        self.clamp = clamp
        self.l1 = Linear(self.half + cond_dim, hidden, rng)
        self.l2 = Linear(hidden, hidden, rng)
        self.out = Linear(hidden, 2 * self.n_b, rng, zero_init=True)

    def params_for(self, v_a, cond=None):
        h = v_a
        if self.cond_dim:
            if cond is None or cond.shape[-1] != self.cond_dim:
                raise ad.ShapeError(f"coupling expects a {self.cond_dim}-dim condition")
            h = ad.concat([v_a, cond], axis=-1)
        h = ad.leaky_relu(self.l1(h), 0.2)
        h = ad.leaky_relu(self.l2(h), 0.2)
        raw = self.out(h)
        log_s = ad.tanh(raw[:, :self.n_b] * (1.0 / self.clamp)) * self.clamp
        return log_s, raw[:, self.n_b:]

    def forward(self, x, cond=None):
        if x.ndim != 2:
            raise ad.ShapeError("affine coupling works on (B, c) latents")
        v_a, v_b = x[:, :self.half], x[:, self.half:]
        log_s, t = self.params_for(v_a, cond)
        u_b = log_s.exp() * v_b + t
        return ad.concat([v_a, u_b], axis=1), log_s.sum(axis=1)

    def inverse(self, y, cond=None, init=False):
        u_a, u_b = y[:, :self.half], y[:, self.half:]
        log_s, t = self.params_for(u_a, cond)
        v_b = (u_b - t) * (-log_s).exp()
        return ad.concat([u_a, v_b], axis=1), -log_s.sum(axis=1)


class FlowStep(Module):
    def __init__(self, channels, rng, hidden=128, cond_dim=0, clamp=5.0):
        self.actnorm = ActNorm(channels)
        self.mix = Inv1x1(channels, rng)
        self.coupling = AffineCoupling(channels, rng, hidden, cond_dim, clamp)

    def forward(self, x, cond=None):
        x, ld1 = self.actnorm(x)
        x, ld2 = self.mix(x)
        x, ld3 = self.coupling(x, cond)
        return x, ld1 + ld2 + ld3

    def inverse(self, y, cond=None, init=False):
        y, ld3 = self.coupling.inverse(y, cond)
        y, ld2 = self.mix.inverse(y)
        y, ld1 = self.actnorm.inverse(y, init=init)
        return y, ld1 + ld2 + ld3


class FlowChain(Module):
    """K flow steps composed in order."""

    def __init__(self, channels, n_steps, rng, hidden=128, cond_dim=0, clamp=5.0,
                 direction="generative"):
        if direction not in ("generative", "normalizing"):
            raise ValueError(f"unknown flow direction {direction!r}")
        self.channels = channels
        self.cond_dim = cond_dim
        self.direction = direction
        self.steps = [FlowStep(channels, rng, hidden, cond_dim, clamp) for _ in range(n_steps)]

    def _check(self, x):
        if x.ndim < 2 or x.shape[1] != self.channels:
            raise ad.ShapeError(f"flow expects {self.channels} channels, got {x.shape}")

    def forward(self, x, cond=None, return_steps=False):
        x = ad.tensor.as_tensor(x)
        self._check(x)
        total = Tensor(np.zeros(x.shape[0]))
        per_step = []
        for step in self.steps:
            x, ld = step(x, cond)
            per_step.append(ld)
            total = total + ld
        return (x, total, per_step) if return_steps else (x, total)

    def inverse(self, y, cond=None, init=False):
        """Returns ``(x, logdet)`` with logdet of the inverse map."""
        y = ad.tensor.as_tensor(y)
        self._check(y)
        total = Tensor(np.zeros(y.shape[0]))
        for step in reversed(self.steps):
            y, ld = step.inverse(y, cond, init=init)
            total = total + ld
        return y, total

    def initialize(self, data, cond=None):
        """Run one data batch through the data-side direction to set act-norms."""
        with ad.no_grad():
            if self.direction == "normalizing":
                self.forward(data, cond)
            else:
                self.inverse(data, cond, init=True)


def flow_forward(z0, chain: FlowChain, cond=None):
    return chain.forward(z0, cond)


def flow_inverse(z_k, chain: FlowChain, cond=None):
    return chain.inverse(z_k, cond)[0]


def std_normal_logpdf(z):
    """Per-sample log density of a standard normal over all non-batch axes."""
    z = ad.tensor.as_tensor(z)
    d = int(np.prod(z.shape[1:]))
    sq = (z * z).reshape(z.shape[0], d).sum(axis=1)
    return sq * -0.5 - 0.5 * d * LOG_2PI


def log_prob(x, chain: FlowChain, cond=None):
    """Per-sample ``log p(x)`` under the chain's push-forward of N(0, I)."""
    if chain.direction == "normalizing":
        z0, logdet = chain.forward(x, cond)
    else:
        z0, logdet = chain.inverse(x, cond)
    return std_normal_logpdf(z0) + logdet


def sample_mode(chain: FlowChain, batch, cond=None):
    """Map the base-distribution mode (zeros) into data space."""
    zeros = Tensor(np.zeros((batch, chain.channels)))
    if chain.direction == "normalizing":
        return chain.inverse(zeros, cond)[0]
    return chain.forward(zeros, cond)[0]
