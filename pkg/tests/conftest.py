"""Shared test utilities: independent gradient oracles."""

import numpy as np
import pytest

from protocaps import tensor as T


def finite_diff_grads(f, tensors, h=1e-5):
    """Central finite differences of a scalar-valued rebuild function.

    ``f`` must rebuild the computation from scratch (reading the tensors'
    current data) and return a python float. Perturbs every element of
    every tensor in place.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-3):
    """Worst-case elementwise relative error with a small-denominator floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_grads(build_loss, params, rtol=1e-6, h=1e-5, floor=1e-3):
    """Assert analytic gradients of build_loss() match central differences.

    ``build_loss`` returns a scalar Tensor; it is re-run for every
    perturbation, so it must construct a fresh graph each call.
    """
    loss = build_loss()
    T.backward(loss)
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.grad = None
    numeric = finite_diff_grads(lambda: build_loss().item(), params, h=h)
    worst = max(max_rel_err(a, n, floor) for a, n in zip(analytic, numeric))
    assert worst <= rtol, f"gradient mismatch: max rel err {worst:.3e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)
