from __future__ import annotations

import numpy as np


class Adam:
    """Bias-corrected Adam over a fixed, ordered list of parameters.

    ``lr_scale`` optionally gives one step-size multiplier per parameter.
    """

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, lr_scale=None):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.lr_scale = [1.0] * len(self.params) if lr_scale is None else list(lr_scale)
        if len(self.lr_scale) != len(self.params):
            raise ValueError("lr_scale needs one entry per parameter")
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {i} {p.shape}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v, k in zip(self.params, self.m, self.v, self.lr_scale):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= (k * self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def state_arrays(self):
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{i}"] = m
            out[f"adam.v.{i}"] = v
        return out

    def load_state_arrays(self, arrays, step_count):
        for i in range(len(self.params)):
            self.m[i] = np.array(arrays[f"adam.m.{i}"], dtype=self.m[i].dtype).reshape(self.m[i].shape)
            self.v[i] = np.array(arrays[f"adam.v.{i}"], dtype=self.v[i].dtype).reshape(self.v[i].shape)
        self.step_count = int(step_count)


def adam_step(params, grads, state: Adam):
    """Functional form: assign ``grads`` to ``params`` then take one step."""
    for p, g in zip(params, grads):
        if np.shape(g) != p.shape:
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
        p.grad = np.asarray(g, dtype=p.data.dtype)
    state.step()
    return params
