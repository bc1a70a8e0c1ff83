"""Shared test helpers: the central-finite-difference gradient oracle."""

from __future__ import annotations

import numpy as np

from dft import tensor as T


def finite_difference(scalar_fn, arrays, h=1e-5):
    """Central finite differences of scalar_fn(*arrays) w.r.t. each array.

    The oracle is intentionally independent of the tape: it re-evaluates
    the forward function with perturbed numpy inputs only.
    """
    grads = []
    for target in arrays:
        g = np.zeros_like(target)
        flat = target.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = scalar_fn(*arrays)
            flat[i] = orig - h
            fm = scalar_fn(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def check_gradients(build_loss, arrays, rtol=1e-4, atol=1e-6, h=1e-5):
    """Assert tape gradients match the finite-difference oracle.

    `build_loss` maps Tensors (one per input array) to a scalar Tensor;
    it must be deterministic across calls (fix any rng inside).
    """
    tensors = [T.param(np.array(a, dtype=np.float64)) for a in arrays]
    loss = build_loss(*tensors)
    T.backward(loss)

    def scalar(*arrs):
        consts = [T.constant(a) for a in arrs]
        return float(build_loss(*consts).data[0])

    numeric = finite_difference(scalar, [t.data.copy() for t in tensors], h=h)
    for t, fd in zip(tensors, numeric):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        np.testing.assert_allclose(analytic, fd, rtol=rtol, atol=atol)
