"""Shared oracles for the test-suite."""

import numpy as np

from uqeval.model import init_model


def numerical_grads(loss_fn, params, step=1e-5):
    """Central differences of ``loss_fn()`` w.r.t. every entry of every array in ``params`` (mutated in place)."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = p[i]
            p[i] = orig + step
            up = loss_fn()
            p[i] = orig - step
            down = loss_fn()
            p[i] = orig
            g[i] = (up - down) / (2 * step)
        out.append(g)
    return out


def max_rel_error(analytic, numeric, floor=1e-8):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def random_model(dims, seed, scale=1.0, dropout_rate=0.0, anchor=None):
    """Model with N(0, scale^2) weights and biases (init_model leaves biases at zero)."""
    model = init_model(dims, dropout_rate=dropout_rate, seed=seed, anchor=anchor)
    rng = np.random.default_rng(seed + 1000)
    for p in model.params:
        p[...] = rng.normal(0.0, scale, size=p.shape)
    return model
