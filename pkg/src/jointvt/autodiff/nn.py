"""Layers built on the tensor engine."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Parameters are Tensor attributes with ``requires_grad``; buffers are
    numpy arrays named in ``_buffer_names``. Submodules may sit in lists."""

    _buffer_names: tuple = ()
    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            items = value if isinstance(value, (list, tuple)) else [value]
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def named_buffers(self, prefix=""):
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def set_buffer(self, dotted, value):
        *path, last = dotted.split(".")
        obj = self
        for part in path:
            obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
        current = getattr(obj, last)
        setattr(obj, last, np.asarray(value, dtype=current.dtype).reshape(current.shape))

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_uniform(rng, shape, fan_in, dtype=None):
    # gain sqrt(2), as for ReLU-family activations
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def zeros_param(shape, dtype=None):
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, zero_init=False):
        if zero_init:
            self.weight = zeros_param((n_in, n_out))
        else:
            self.weight = kaiming_uniform(rng, (n_in, n_out), n_in)
        self.bias = zeros_param((n_out,)) if bias else None

    def forward(self, x):
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, pad=0, bias=True):
        self.stride, self.pad = stride, pad
        self.weight = kaiming_uniform(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel)
        self.bias = zeros_param((c_out,)) if bias else None

    def forward(self, x):
        y = T.conv2d(x, self.weight, self.stride, self.pad)
        if self.bias is not None:
            y = y + self.bias.reshape(1, -1, 1, 1)
        return y


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, pad=0, bias=True):
        self.stride, self.pad = stride, pad
        self.weight = kaiming_uniform(rng, (c_in, c_out, kernel, kernel), c_in * kernel * kernel)
        self.bias = zeros_param((c_out,)) if bias else None

    def forward(self, x):
        y = T.conv_transpose2d(x, self.weight, self.stride, self.pad)
        if self.bias is not None:
            y = y + self.bias.reshape(1, -1, 1, 1)
        return y


class BatchNorm(Module):
    """Per-channel batch normalisation over axis 1 of (B, C) or (B, C, H, W).

    With ``affine=False`` there is no learnable scale/shift.
    """

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5, affine=True):
        self.momentum, self.eps, self.affine = momentum, eps, affine
        dtype = T.default_dtype()
        if affine:
            self.scale = Tensor(np.ones(channels), requires_grad=True)
            self.shift = zeros_param((channels,))
        else:
            self._ones = Tensor(np.ones(channels))
            self._zeros = Tensor(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def _affine(self):
        return (self.scale, self.shift) if self.affine else (self._ones, self._zeros)

    def forward(self, x):
        gamma, beta = self._affine()
        if self.training:
            if x.shape[0] < 2:
                raise ValueError("batch norm in train mode needs a batch of at least 2")
            y, mu, var = T.batch_norm(x, gamma, beta, self.eps)
            n = x.size // x.shape[1]
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(self.running_mean.dtype)
            unbiased = var * n / max(n - 1, 1)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
            return y
        shape = [1] * x.ndim
        shape[1] = x.shape[1]
        inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
        scale = gamma * Tensor((inv_std).reshape(-1), dtype=x.dtype)
        offset = beta - scale * Tensor(self.running_mean, dtype=x.dtype)
        return x * scale.reshape(shape) + offset.reshape(shape)
