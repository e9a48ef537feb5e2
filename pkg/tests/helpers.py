"""Shared test utilities: finite-difference gradient checking."""

import numpy as np

from corrseg import tensor as T


def numeric_grad(fn, params, h=1e-5):
    """Central-difference gradient of the scalar fn() w.r.t. each Tensor in params."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            hi = fn().data.item()
            flat[i] = old - h
            lo = fn().data.item()
            flat[i] = old
            gf[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return np.abs(analytic - numeric).max(initial=0.0) / scale


def check_gradients(fn, params, tol=1e-4, h=1e-5):
    """Backprop fn() and compare every parameter gradient against central differences.

    Returns the worst relative error seen (also asserted < tol).
    """
    for p in params:
        p.grad = None
    loss = fn()
    loss.backward()
    numeric = numeric_grad(fn, params, h=h)
    worst = 0.0
    for p, num in zip(params, numeric):
        ana = p.grad if p.grad is not None else np.zeros_like(p.data)
        err = relative_error(ana, num)
        assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol:.0e}"
        worst = max(worst, err)
    return worst
