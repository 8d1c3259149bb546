"""Central finite-difference gradient verification.

grad_check() is the oracle every differentiable operator and composite is
held against: float64 inputs, central differences, and a relative error
normalized by max(1, |analytic|, |numeric|).
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def grad_check(f, inputs, eps: float = 1e-6) -> float:
    """Max relative error between analytic and numeric gradients.

    ``f`` maps the given tensors to a scalar Tensor; ``inputs`` are float64
    tensors with requires_grad=True. Every element of every input is
    perturbed by +/- eps.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ValueError("grad_check requires a scalar objective")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    max_err = 0.0
    for t, an in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        an_flat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(*inputs).data.reshape(-1)[0])
            flat[i] = orig - eps
            f_minus = float(f(*inputs).data.reshape(-1)[0])
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(an_flat[i] - fd) / max(1.0, abs(an_flat[i]), abs(fd))
            if err > max_err:
                max_err = err
    return max_err


def rand_tensor(rng: np.random.Generator, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), dtype=np.float64, requires_grad=True)
