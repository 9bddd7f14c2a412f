"""Central-difference oracles for gradients and Jacobians (float64)."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, precision, tsum, mul


def numeric_jacobian(fn, x, h=1e-5):
    """d fn(x) / d x for a vector -> vector numpy function, by central differences."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        cols.append((np.ravel(fn(x + e)) - np.ravel(fn(x - e))) / (2 * h))
    return np.stack(cols, axis=1)


def rel_error(a, b):
    """Largest elementwise gap, relative to the larger gradient's scale."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def gradcheck(fn, arrays, h=1e-4, seed=0):
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` maps Tensors to a Tensor; its output is contracted with a fixed
    random weight to make a scalar. Returns the worst relative error over inputs.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    with precision(np.float64):
        probe = fn(*[Tensor(a) for a in arrays])
        w = np.random.default_rng(seed).standard_normal(probe.shape)

        def scalar(vals):
            return float((fn(*[Tensor(v) for v in vals]).data * w).sum())

        ts = [Tensor(a, requires_grad=True) for a in arrays]
        tsum(mul(fn(*ts), Tensor(w))).backward()
        worst = 0.0
        for k, a in enumerate(arrays):
            num = np.zeros_like(a)
            for i in range(a.size):
                vals = [v.copy() for v in arrays]
                vals[k].flat[i] += h
                up = scalar(vals)
                vals[k].flat[i] -= 2 * h
                num.flat[i] = (up - scalar(vals)) / (2 * h)
            got = ts[k].grad if ts[k].grad is not None else np.zeros_like(a)
            worst = max(worst, rel_error(got, num))
    return worst
