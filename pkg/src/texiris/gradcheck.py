"""Finite-difference gradient checking for scalar functions of tensors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, precision


@dataclass
class GradCheck:
    errors: list  # normwise relative error per input
    checked: int  # number of coordinates compared

    @property
    def max_error(self):
        return max(self.errors) if self.errors else 0.0


def relative_error(analytic, numeric):
    a, n = np.ravel(analytic).astype(np.float64), np.ravel(numeric).astype(np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def gradcheck(fn, inputs, eps=1e-6, max_coords=None, rng=None, dtype=np.float32):
    """Compare autodiff gradients of ``fn(*tensors)`` with central differences.

    The analytic gradient is taken at ``dtype``; the reference differences are
    evaluated on the same function at float64 so that ``eps`` can be small.
    ``max_coords`` limits each input to a random subset of coordinates.
    ``fn`` must return a scalar tensor.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]

    with precision(dtype):
        leaves = [Tensor(x, requires_grad=True) for x in inputs]
        fn(*leaves).backward()
        grads = [np.zeros(x.shape) if t.grad is None else np.asarray(t.grad, np.float64)
                 for x, t in zip(inputs, leaves)]

    def f64(values):
        with precision(np.float64):
            return float(fn(*[Tensor(v) for v in values]).item())

    errors, checked = [], 0
    for i, x in enumerate(inputs):
        coords = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            coords = rng.choice(x.size, size=max_coords, replace=False)
        numeric = np.empty(len(coords))
        for j, flat in enumerate(coords):
            plus, minus = [v.copy() for v in inputs], [v.copy() for v in inputs]
            plus[i].flat[flat] += eps
            minus[i].flat[flat] -= eps
            numeric[j] = (f64(plus) - f64(minus)) / (2 * eps)
        errors.append(relative_error(grads[i].ravel()[coords], numeric))
        checked += len(coords)
    return GradCheck(errors, checked)
